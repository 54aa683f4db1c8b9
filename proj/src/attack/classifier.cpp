#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "mialab/attack/attack.hpp"
#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"

namespace mialab::attack {

namespace {

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

void check_labels(std::size_t rows, std::span<const int> labels) {
    if (labels.size() != rows)
        throw InputError("attack training: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " rows");
    std::size_t pos = 0, neg = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw InputError("attack training: labels must be 0 or 1");
        (y ? pos : neg)++;
    }
    if (pos == 0 || neg == 0) throw InputError("attack training: both classes are required");
    if (pos < 2 || neg < 2) throw InputError("attack training: need at least two rows per class");
}

void check_finite(const Matrix& x) {
    for (double v : x.values)
        if (!std::isfinite(v)) throw InputError("attack training: non-finite feature value");
}

}  // namespace

BalancedSet balance_training_set(std::size_t n_members, std::size_t n_non_members, std::uint64_t seed) {
    if (n_members == 0) throw InputError("balance_training_set: no known members");
    if (n_non_members < n_members)
        throw InputError("balance_training_set: " + std::to_string(n_non_members) + " non-members cannot balance " +
                         std::to_string(n_members) + " members");
    SplitMix64 rng(derive_seed(seed, "balance"));
    auto order = permutation(n_non_members, rng);
    BalancedSet out;
    out.members.resize(n_members);
    for (std::size_t i = 0; i < n_members; ++i) out.members[i] = i;
    out.non_members.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_members));
    std::sort(out.non_members.begin(), out.non_members.end());
    return out;
}

void to_json(nlohmann::json& j, const AttackModel& m) {
    j = nlohmann::ordered_json{{"strategy", m.strategy},
                               {"fusion_weights", nlohmann::json(m.fusion_weights)},
                               {"seed", m.seed},
                               {"iterations", m.iterations},
                               {"converged", m.converged},
                               {"bias", m.bias},
                               {"weights", m.weights}};
}

AttackModel train_logistic(const Matrix& x, std::span<const int> labels, const LogisticConfig& config) {
    if (config.max_iter < 1) throw InputError("train_logistic: max_iter must be >= 1");
    if (!(config.learning_rate > 0.0)) throw InputError("train_logistic: learning rate must be > 0");
    check_labels(x.rows, labels);
    check_finite(x);
    const std::size_t n = x.rows, d = x.cols;
    AttackModel m;
    m.weights.assign(d, 0.0);
    std::vector<double> gw(d);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t it = 0; it < config.max_iter; ++it) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = x.row(i);
            double z = m.bias;
            for (std::size_t k = 0; k < d; ++k) z += m.weights[k] * row[k];
            const double r = (sigmoid(z) - labels[i]) * inv_n;
            for (std::size_t k = 0; k < d; ++k) gw[k] += r * row[k];
            gb += r;
        }
        double norm2 = gb * gb;
        for (std::size_t k = 0; k < d; ++k) {
            gw[k] += config.l2 * m.weights[k];
            norm2 += gw[k] * gw[k];
        }
        if (std::sqrt(norm2) < config.tolerance) {
            m.converged = true;
            break;
        }
        for (std::size_t k = 0; k < d; ++k) m.weights[k] -= config.learning_rate * gw[k];
        m.bias -= config.learning_rate * gb;
        m.iterations = it + 1;
    }
    return m;
}

Inference attack_infer(const AttackModel& model, const Matrix& x) {
    if (x.cols != model.weights.size())
        throw InputError("attack_infer: rows have " + std::to_string(x.cols) + " features, model expects " +
                         std::to_string(model.weights.size()));
    Inference out;
    out.probability.reserve(x.rows);
    out.member.reserve(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto row = x.row(i);
        double z = model.bias;
        for (std::size_t k = 0; k < x.cols; ++k) z += model.weights[k] * row[k];
        const double p = sigmoid(z);
        out.probability.push_back(p);
        out.member.push_back(p >= 0.5);
    }
    return out;
}

MlpClassifier train_mlp_classifier(const Matrix& x, std::span<const int> labels, const MlpClassifierConfig& c) {
    check_labels(x.rows, labels);
    check_finite(x);
    if (c.hidden == 0 || c.max_iter == 0) throw InputError("train_mlp_classifier: hidden and max_iter must be >= 1");
    const std::size_t n = x.rows, d = x.cols, h = c.hidden;
    MlpClassifier m;
    m.in = d;
    m.hidden = h;
    SplitMix64 rng(derive_seed(c.seed, "mlp-classifier"));
    m.w1.resize(h * d);
    m.b1.assign(h, 0.0);
    m.w2.resize(h);
    const double s1 = std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(d, 1)));
    for (auto& w : m.w1) w = s1 * rng.normal();
    for (auto& w : m.w2) w = std::sqrt(1.0 / static_cast<double>(h)) * rng.normal();

    // flat parameter vector view for Adam: w1, b1, w2, b2
    const std::size_t np = h * d + h + h + 1;
    std::vector<double> mom1(np, 0.0), mom2(np, 0.0), grad(np);
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> pre(h), act(h);
    for (std::size_t it = 0; it < c.max_iter; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = x.row(i);
            double z = m.b2;
            for (std::size_t j = 0; j < h; ++j) {
                double a = m.b1[j];
                const double* w = m.w1.data() + j * d;
                for (std::size_t k = 0; k < d; ++k) a += w[k] * row[k];
                pre[j] = a;
                act[j] = std::max(0.0, a);
                z += m.w2[j] * act[j];
            }
            const double r = (sigmoid(z) - labels[i]) * inv_n;
            for (std::size_t j = 0; j < h; ++j) {
                grad[h * d + h + j] += r * act[j];
                if (pre[j] <= 0.0) continue;
                const double dp = r * m.w2[j];
                double* g = grad.data() + j * d;
                for (std::size_t k = 0; k < d; ++k) g[k] += dp * row[k];
                grad[h * d + j] += dp;
            }
            grad[np - 1] += r;
        }
        for (std::size_t k = 0; k < h * d; ++k) grad[k] += c.l2 * m.w1[k];
        for (std::size_t j = 0; j < h; ++j) grad[h * d + h + j] += c.l2 * m.w2[j];

        const double t = static_cast<double>(it + 1);
        const double corr1 = 1.0 - std::pow(beta1, t), corr2 = 1.0 - std::pow(beta2, t);
        auto param = [&](std::size_t k) -> double& {
            if (k < h * d) return m.w1[k];
            if (k < h * d + h) return m.b1[k - h * d];
            if (k < h * d + 2 * h) return m.w2[k - h * d - h];
            return m.b2;
        };
        for (std::size_t k = 0; k < np; ++k) {
            mom1[k] = beta1 * mom1[k] + (1 - beta1) * grad[k];
            mom2[k] = beta2 * mom2[k] + (1 - beta2) * grad[k] * grad[k];
            param(k) -= c.learning_rate * (mom1[k] / corr1) / (std::sqrt(mom2[k] / corr2) + eps);
        }
    }
    return m;
}

std::vector<double> mlp_classifier_infer(const MlpClassifier& m, const Matrix& x) {
    if (x.cols != m.in) throw InputError("mlp_classifier_infer: dimension mismatch");
    std::vector<double> out;
    out.reserve(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto row = x.row(i);
        double z = m.b2;
        for (std::size_t j = 0; j < m.hidden; ++j) {
            double a = m.b1[j];
            const double* w = m.w1.data() + j * m.in;
            for (std::size_t k = 0; k < m.in; ++k) a += w[k] * row[k];
            z += m.w2[j] * std::max(0.0, a);
        }
        out.push_back(sigmoid(z));
    }
    return out;
}

namespace {

using features::Feature;
using features::kAllFeatures;

bool uses_upsamplers(features::Strategy s) {
    using features::Strategy;
    return s == Strategy::mlp || s == Strategy::weighted_mlp || s == Strategy::mlp_compress ||
           s == Strategy::weighted_mlp_compress;
}

bool compresses(features::Strategy s) {
    return s == features::Strategy::mlp_compress || s == features::Strategy::weighted_mlp_compress;
}

double scalar(const features::FeatureRecord& r, std::size_t k) {
    return k == 0 ? r.confidence : (k == 1 ? r.entropy : r.loss);
}

/// Gradient buffers shaped like the trainable parts of a FusionConfig.
struct FusionGrads {
    std::array<features::ScalarMlp, 3> mlps;
    std::vector<double> compress;
};

}  // namespace

JointModel train_logistic_joint(std::span<const features::FeatureRecord> records, std::span<const int> labels,
                                const features::FusionConfig& fusion, const LogisticConfig& config) {
    JointModel out{fusion, {}};
    if (!uses_upsamplers(fusion.strategy)) {
        out.model = train_logistic(features::fuse(records, fusion), labels, config);
        return out;
    }
    if (config.max_iter < 1) throw InputError("train_logistic: max_iter must be >= 1");
    check_labels(records.size(), labels);
    fusion.validate();
    auto& f = out.fusion;
    const std::size_t n = records.size(), d = f.vector_dim, dim = f.output_dim();
    const bool comp = compresses(f.strategy);
    const std::size_t u_dim = comp ? f.included_count() * d : dim;
    AttackModel& m = out.model;
    m.weights.assign(dim, 0.0);
    const double inv_n = 1.0 / static_cast<double>(n);

    FusionGrads g;
    for (std::size_t k = 0; k < 3; ++k) g.mlps[k] = features::ScalarMlp::zeros(f.mlps[k].hidden(), f.mlps[k].out());
    std::vector<double> gw(dim), u, x, du, act;
    for (std::size_t it = 0; it < config.max_iter; ++it) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        for (auto& mg : g.mlps) {
            std::fill(mg.w1.begin(), mg.w1.end(), 0.0);
            std::fill(mg.b1.begin(), mg.b1.end(), 0.0);
            std::fill(mg.w2.begin(), mg.w2.end(), 0.0);
            std::fill(mg.b2.begin(), mg.b2.end(), 0.0);
        }
        g.compress.assign(f.compress.size(), 0.0);

        for (std::size_t i = 0; i < n; ++i) {
            const auto& r = records[i];
            // forward: u = weighted blocks, x = u or C u
            u.clear();
            for (std::size_t k = 0; k < 3; ++k) {
                if (!f.include[k]) continue;
                const double w = f.block_weight(kAllFeatures[k]);
                for (double v : features::upsample_scalar(scalar(r, k), f.mlps[k])) u.push_back(w * v);
            }
            if (f.includes(Feature::vector))
                for (double v : r.vector) u.push_back(f.block_weight(Feature::vector) * v);
            if (comp) {
                x.assign(dim, 0.0);
                for (std::size_t a = 0; a < dim; ++a)
                    for (std::size_t b = 0; b < u_dim; ++b) x[a] += f.compress[a * u_dim + b] * u[b];
            } else {
                x = u;
            }
            double z = m.bias;
            for (std::size_t k = 0; k < dim; ++k) z += m.weights[k] * x[k];
            const double resid = (sigmoid(z) - labels[i]) * inv_n;

            // backward
            for (std::size_t k = 0; k < dim; ++k) gw[k] += resid * x[k];
            gb += resid;
            if (comp) {
                du.assign(u_dim, 0.0);
                for (std::size_t a = 0; a < dim; ++a) {
                    const double dx = resid * m.weights[a];
                    for (std::size_t b = 0; b < u_dim; ++b) {
                        g.compress[a * u_dim + b] += dx * u[b];
                        du[b] += f.compress[a * u_dim + b] * dx;
                    }
                }
            } else {
                du.resize(u_dim);
                for (std::size_t k = 0; k < dim; ++k) du[k] = resid * m.weights[k];
            }
            std::size_t offset = 0;
            for (std::size_t k = 0; k < 3; ++k) {
                if (!f.include[k]) continue;
                const auto& mlp = f.mlps[k];
                auto& mg = g.mlps[k];
                const double w = f.block_weight(kAllFeatures[k]);
                const double s = scalar(r, k);
                const std::size_t h = mlp.hidden();
                act.resize(h);
                for (std::size_t j = 0; j < h; ++j) act[j] = std::max(0.0, mlp.w1[j] * s + mlp.b1[j]);
                for (std::size_t o = 0; o < d; ++o) {
                    const double dout = w * du[offset + o];
                    mg.b2[o] += dout;
                    for (std::size_t j = 0; j < h; ++j) mg.w2[o * h + j] += dout * act[j];
                }
                for (std::size_t j = 0; j < h; ++j) {
                    if (mlp.w1[j] * s + mlp.b1[j] <= 0.0) continue;
                    double da = 0.0;
                    for (std::size_t o = 0; o < d; ++o) da += mlp.w2[o * h + j] * w * du[offset + o];
                    mg.w1[j] += da * s;
                    mg.b1[j] += da;
                }
                offset += d;
            }
        }

        double norm2 = gb * gb;
        for (std::size_t k = 0; k < dim; ++k) {
            gw[k] += config.l2 * m.weights[k];
            norm2 += gw[k] * gw[k];
        }
        for (const auto& mg : g.mlps)
            for (const auto* v : {&mg.w1, &mg.b1, &mg.w2, &mg.b2})
                for (double x2 : *v) norm2 += x2 * x2;
        for (double x2 : g.compress) norm2 += x2 * x2;
        if (std::sqrt(norm2) < config.tolerance) {
            m.converged = true;
            break;
        }
        const double lr = config.learning_rate;
        for (std::size_t k = 0; k < dim; ++k) m.weights[k] -= lr * gw[k];
        m.bias -= lr * gb;
        for (std::size_t k = 0; k < 3; ++k) {
            if (!f.include[k]) continue;
            auto& mlp = f.mlps[k];
            const auto& mg = g.mlps[k];
            for (std::size_t q = 0; q < mlp.w1.size(); ++q) mlp.w1[q] -= lr * mg.w1[q];
            for (std::size_t q = 0; q < mlp.b1.size(); ++q) mlp.b1[q] -= lr * mg.b1[q];
            for (std::size_t q = 0; q < mlp.w2.size(); ++q) mlp.w2[q] -= lr * mg.w2[q];
            for (std::size_t q = 0; q < mlp.b2.size(); ++q) mlp.b2[q] -= lr * mg.b2[q];
        }
        for (std::size_t q = 0; q < f.compress.size(); ++q) f.compress[q] -= lr * g.compress[q];
        m.iterations = it + 1;
    }
    return out;
}

}  // namespace mialab::attack
