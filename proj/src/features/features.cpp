#include "mialab/features/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"
#include "mialab/nn/ops.hpp"
#include "mialab/nn/transformer.hpp"

namespace mialab::features {

FeatureRecord extract_features(const nn::ModelState& model, std::span<const nn::TokenId> sequence) {
    if (sequence.size() < 2)
        throw InputError("extract_features: need at least two tokens, got " + std::to_string(sequence.size()));
    const auto pair = nn::next_token_pair(sequence);
    const auto trace = nn::forward(model, pair.inputs);
    const std::size_t n = trace.seq_len;

    FeatureRecord r;
    for (std::size_t pos = 0; pos < n; ++pos) {
        const auto lp = nn::log_softmax(trace.logits_row(pos));
        double top = 0.0, h = 0.0;
        for (double l : lp) {
            const double p = std::exp(l);
            top = std::max(top, p);
            h -= p * l;
        }
        r.confidence += top;
        r.entropy += h;
    }
    r.confidence /= static_cast<double>(n);
    r.entropy /= static_cast<double>(n);
    r.loss = nn::lm_loss(trace, pair.targets);

    const std::size_t d = model.config.d_model;
    const auto& hidden = trace.penultimate();
    r.vector.assign(d, 0.0);
    for (std::size_t pos = 0; pos < n; ++pos)
        for (std::size_t k = 0; k < d; ++k) r.vector[k] += hidden[pos * d + k];
    for (auto& v : r.vector) v /= static_cast<double>(n);
    return r;
}

FeatureRecord extract_features(const nn::ModelState& model, const corpus::Tokenizer& tokenizer,
                               const corpus::Sample& sample) {
    return extract_features(model, tokenizer.encode_with_eos(corpus::full_text(sample)));
}

std::string to_string(Feature f) {
    switch (f) {
        case Feature::confidence: return "confidence";
        case Feature::entropy: return "entropy";
        case Feature::loss: return "loss";
        case Feature::vector: return "vector";
    }
    return "?";
}

Feature feature_from_string(const std::string& name) {
    for (auto f : kAllFeatures)
        if (to_string(f) == name) return f;
    throw ConfigError("unknown feature '" + name + "' (expected confidence, entropy, loss or vector)");
}

namespace {

const std::array<std::pair<Strategy, const char*>, 8> kStrategyNames = {{
    {Strategy::concat, "concat"},
    {Strategy::weighted_concat, "weighted-concat"},
    {Strategy::sum, "sum"},
    {Strategy::weighted_sum, "weighted-sum"},
    {Strategy::mlp, "mlp"},
    {Strategy::weighted_mlp, "weighted-mlp"},
    {Strategy::mlp_compress, "mlp-compress"},
    {Strategy::weighted_mlp_compress, "weighted-mlp-compress"},
}};

bool is_concat(Strategy s) { return s == Strategy::concat || s == Strategy::weighted_concat; }
bool is_sum(Strategy s) { return s == Strategy::sum || s == Strategy::weighted_sum; }
bool is_compress(Strategy s) { return s == Strategy::mlp_compress || s == Strategy::weighted_mlp_compress; }

double scalar_of(const FeatureRecord& r, Feature f) {
    switch (f) {
        case Feature::confidence: return r.confidence;
        case Feature::entropy: return r.entropy;
        case Feature::loss: return r.loss;
        case Feature::vector: break;
    }
    throw InputError("scalar_of: vector is not a scalar feature");
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string to_string(Strategy s) {
    for (const auto& [k, name] : kStrategyNames)
        if (k == s) return name;
    return "?";
}

std::vector<std::string> strategy_names() {
    std::vector<std::string> out;
    for (const auto& entry : kStrategyNames) out.emplace_back(entry.second);
    return out;
}

Strategy strategy_from_string(const std::string& name) {
    for (const auto& [k, n] : kStrategyNames)
        if (name == n) return k;
    std::string valid;
    for (const auto& n : strategy_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown fusion strategy '" + name + "' (valid: " + valid + ")");
}

bool is_weighted(Strategy s) {
    return s == Strategy::weighted_concat || s == Strategy::weighted_sum || s == Strategy::weighted_mlp ||
           s == Strategy::weighted_mlp_compress;
}

Strategy unweighted(Strategy s) {
    switch (s) {
        case Strategy::weighted_concat: return Strategy::concat;
        case Strategy::weighted_sum: return Strategy::sum;
        case Strategy::weighted_mlp: return Strategy::mlp;
        case Strategy::weighted_mlp_compress: return Strategy::mlp_compress;
        default: return s;
    }
}

Strategy weighted(Strategy s) {
    switch (s) {
        case Strategy::concat: return Strategy::weighted_concat;
        case Strategy::sum: return Strategy::weighted_sum;
        case Strategy::mlp: return Strategy::weighted_mlp;
        case Strategy::mlp_compress: return Strategy::weighted_mlp_compress;
        default: return s;
    }
}

double FusionWeights::operator[](Feature f) const {
    switch (f) {
        case Feature::confidence: return confidence;
        case Feature::entropy: return entropy;
        case Feature::loss: return loss;
        case Feature::vector: return vector;
    }
    return 0.0;
}

ScalarMlp ScalarMlp::zeros(std::size_t hidden, std::size_t out) {
    ScalarMlp m;
    m.w1.assign(hidden, 0.0);
    m.b1.assign(hidden, 0.0);
    m.w2.assign(out * hidden, 0.0);
    m.b2.assign(out, 0.0);
    return m;
}

ScalarMlp ScalarMlp::random(std::size_t hidden, std::size_t out, std::uint64_t seed) {
    SplitMix64 rng(seed);
    ScalarMlp m = zeros(hidden, out);
    for (auto& w : m.w1) w = std::sqrt(2.0) * rng.normal();
    for (auto& b : m.b1) b = rng.uniform(-1.0, 1.0);
    const double s2 = std::sqrt(2.0 / static_cast<double>(hidden));
    for (auto& w : m.w2) w = s2 * rng.normal();
    return m;
}

std::vector<double> upsample_scalar(double value, const ScalarMlp& m) {
    const std::size_t h = m.hidden(), d = m.out();
    if (m.b1.size() != h || m.w2.size() != d * h || h == 0 || d == 0)
        throw ConfigError("upsample_scalar: layer sizes disagree (w1 " + std::to_string(h) + ", b1 " +
                          std::to_string(m.b1.size()) + ", w2 " + std::to_string(m.w2.size()) + ", b2 " +
                          std::to_string(d) + ")");
    std::vector<double> act(h);
    for (std::size_t j = 0; j < h; ++j) act[j] = std::max(0.0, m.w1[j] * value + m.b1[j]);
    std::vector<double> out(m.b2);
    for (std::size_t i = 0; i < d; ++i) {
        const double* w = m.w2.data() + i * h;
        for (std::size_t j = 0; j < h; ++j) out[i] += w[j] * act[j];
    }
    return out;
}

FusionConfig FusionConfig::make(Strategy strategy, const FusionWeights& weights, std::size_t d, std::uint64_t seed,
                                std::array<bool, 4> include, std::size_t compress_dim) {
    if (d == 0) throw ConfigError("fusion: vector dimension must be positive");
    FusionConfig c;
    c.strategy = strategy;
    c.weights = weights;
    c.include = include;
    c.vector_dim = d;
    c.compress_dim = compress_dim == 0 ? d : compress_dim;
    const std::size_t hidden = std::max<std::size_t>(1, d / 2);
    for (std::size_t k = 0; k < 3; ++k)
        c.mlps[k] = ScalarMlp::random(hidden, d, derive_seed(seed, "fusion-mlp-" + to_string(kAllFeatures[k])));
    if (is_compress(strategy)) {
        const std::size_t in = c.included_count() * d;
        SplitMix64 rng(derive_seed(seed, "fusion-compress"));
        c.compress.resize(c.compress_dim * in);
        const double s = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(in, 1)));
        for (auto& w : c.compress) w = s * rng.normal();
    }
    c.validate();
    return c;
}

std::size_t FusionConfig::included_count() const {
    return static_cast<std::size_t>(std::count(include.begin(), include.end(), true));
}

double FusionConfig::block_weight(Feature f) const { return is_weighted(strategy) ? weights[f] : 1.0; }

std::size_t FusionConfig::output_dim() const {
    std::size_t scalars = 0;
    for (std::size_t k = 0; k < 3; ++k) scalars += include[k] ? 1 : 0;
    const std::size_t vec = includes(Feature::vector) ? vector_dim : 0;
    if (is_concat(strategy)) return scalars + vec;
    if (is_sum(strategy)) return (scalars > 0 ? 1 : 0) + vec;
    if (is_compress(strategy)) return compress_dim;
    return scalars * vector_dim + vec;
}

void FusionConfig::validate() const {
    if (included_count() == 0) throw ConfigError("fusion: at least one feature must be included");
    for (auto f : kAllFeatures)
        if (!(weights[f] >= 0.0) || !std::isfinite(weights[f]))
            throw ConfigError("fusion: weight for " + to_string(f) + " must be a finite value >= 0");
    if (is_concat(strategy) || is_sum(strategy)) return;
    for (std::size_t k = 0; k < 3; ++k) {
        if (!include[k]) continue;
        const auto& m = mlps[k];
        if (m.out() != vector_dim || m.b1.size() != m.hidden() || m.w2.size() != m.out() * m.hidden())
            throw ConfigError("fusion: " + to_string(kAllFeatures[k]) + " upsampler does not map 1 -> " +
                              std::to_string(vector_dim));
    }
    if (is_compress(strategy) && compress.size() != compress_dim * included_count() * vector_dim)
        throw ConfigError("fusion: compression map has the wrong size");
}

std::vector<double> fuse_row(const FeatureRecord& r, const FusionConfig& c) {
    if (c.includes(Feature::vector) && r.vector.size() != c.vector_dim)
        throw InputError("fuse: record vector has " + std::to_string(r.vector.size()) + " entries, expected " +
                         std::to_string(c.vector_dim));
    std::vector<double> out;
    out.reserve(c.output_dim());
    auto push_vector = [&] {
        if (!c.includes(Feature::vector)) return;
        const double w = c.block_weight(Feature::vector);
        for (double v : r.vector) out.push_back(w * v);
    };

    if (is_concat(c.strategy)) {
        for (std::size_t k = 0; k < 3; ++k)
            if (c.include[k]) out.push_back(c.block_weight(kAllFeatures[k]) * scalar_of(r, kAllFeatures[k]));
        push_vector();
        return out;
    }
    if (is_sum(c.strategy)) {
        double s = 0.0;
        bool any = false;
        for (std::size_t k = 0; k < 3; ++k) {
            if (!c.include[k]) continue;
            s += c.block_weight(kAllFeatures[k]) * scalar_of(r, kAllFeatures[k]);
            any = true;
        }
        if (any) out.push_back(s);
        push_vector();
        return out;
    }
    for (std::size_t k = 0; k < 3; ++k) {
        if (!c.include[k]) continue;
        const double w = c.block_weight(kAllFeatures[k]);
        for (double v : upsample_scalar(scalar_of(r, kAllFeatures[k]), c.mlps[k])) out.push_back(w * v);
    }
    push_vector();
    if (!is_compress(c.strategy)) return out;

    std::vector<double> compressed(c.compress_dim, 0.0);
    const std::size_t in = out.size();
    for (std::size_t i = 0; i < c.compress_dim; ++i) {
        const double* w = c.compress.data() + i * in;
        double acc = 0.0;
        for (std::size_t j = 0; j < in; ++j) acc += w[j] * out[j];
        compressed[i] = acc;
    }
    return compressed;
}

Matrix fuse(std::span<const FeatureRecord> records, const FusionConfig& config) {
    config.validate();
    Matrix m;
    m.rows = records.size();
    m.cols = config.output_dim();
    m.values.reserve(m.rows * m.cols);
    for (const auto& r : records) {
        const auto row = fuse_row(r, config);
        m.values.insert(m.values.end(), row.begin(), row.end());
    }
    return m;
}

namespace {

Matrix to_matrix(std::span<const FeatureRecord> rows) {
    Matrix m;
    m.rows = rows.size();
    m.cols = rows.empty() ? 0 : 3 + rows.front().vector.size();
    m.values.reserve(m.rows * m.cols);
    for (const auto& r : rows) {
        if (3 + r.vector.size() != m.cols) throw InputError("standardize: records differ in vector length");
        m.values.insert(m.values.end(), {r.confidence, r.entropy, r.loss});
        m.values.insert(m.values.end(), r.vector.begin(), r.vector.end());
    }
    return m;
}

}  // namespace

Standardizer::Standardizer(std::vector<double> mean, std::vector<double> scale)
    : mean_(std::move(mean)), scale_(std::move(scale)) {}

Standardizer Standardizer::fit(const Matrix& rows) {
    if (rows.rows == 0) throw InputError("standardize: no training rows");
    std::vector<double> mean(rows.cols, 0.0), var(rows.cols, 0.0);
    for (std::size_t i = 0; i < rows.rows; ++i)
        for (std::size_t j = 0; j < rows.cols; ++j) mean[j] += rows.values[i * rows.cols + j];
    for (auto& m : mean) m /= static_cast<double>(rows.rows);
    for (std::size_t i = 0; i < rows.rows; ++i)
        for (std::size_t j = 0; j < rows.cols; ++j) {
            const double dlt = rows.values[i * rows.cols + j] - mean[j];
            var[j] += dlt * dlt;
        }
    std::vector<double> scale(rows.cols);
    for (std::size_t j = 0; j < rows.cols; ++j)
        scale[j] = std::max(std::sqrt(var[j] / static_cast<double>(rows.rows)), kStdFloor);
    return Standardizer(std::move(mean), std::move(scale));
}

Standardizer Standardizer::fit(std::span<const FeatureRecord> rows) { return fit(to_matrix(rows)); }

Matrix Standardizer::apply(const Matrix& rows) const {
    if (rows.cols != mean_.size())
        throw InputError("standardize: " + std::to_string(rows.cols) + " columns, statistics for " +
                         std::to_string(mean_.size()));
    Matrix out = rows;
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < out.cols; ++j) {
            double& v = out.values[i * out.cols + j];
            v = (v - mean_[j]) / scale_[j];
        }
    return out;
}

std::vector<FeatureRecord> Standardizer::apply(std::span<const FeatureRecord> rows) const {
    const Matrix z = apply(to_matrix(rows));
    std::vector<FeatureRecord> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto r = z.row(i);
        out[i].confidence = r[0];
        out[i].entropy = r[1];
        out[i].loss = r[2];
        out[i].vector.assign(r.begin() + 3, r.end());
    }
    return out;
}

void write_feature_csv(const FeatureTable& t, const std::filesystem::path& path) {
    if (t.sample_ids.size() != t.records.size() || t.membership.size() != t.records.size())
        throw InputError("write_feature_csv: column lengths differ");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    const std::size_t d = t.records.empty() ? 0 : t.records.front().vector.size();
    out << "sample_id,membership,confidence,entropy,loss";
    for (std::size_t k = 0; k < d; ++k) out << ",v" << k;
    out << '\n';
    for (std::size_t i = 0; i < t.records.size(); ++i) {
        const auto& r = t.records[i];
        if (r.vector.size() != d) throw InputError("write_feature_csv: records differ in vector length");
        out << t.sample_ids[i] << ',' << corpus::to_string(t.membership[i]) << ',' << fmt(r.confidence) << ','
            << fmt(r.entropy) << ',' << fmt(r.loss);
        for (double v : r.vector) out << ',' << fmt(v);
        out << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

FeatureTable read_feature_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header");
    const std::size_t header_cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (line.rfind("sample_id,membership,confidence,entropy,loss", 0) != 0 || header_cols < 5)
        throw FormatError(path.string() + ": unexpected header");
    const std::size_t d = header_cols - 5;
    FeatureTable t;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
        if (cells.size() != header_cols) throw FormatError(where + "expected " + std::to_string(header_cols) + " cells");
        try {
            FeatureRecord r;
            r.confidence = std::stod(cells[2]);
            r.entropy = std::stod(cells[3]);
            r.loss = std::stod(cells[4]);
            r.vector.resize(d);
            for (std::size_t k = 0; k < d; ++k) r.vector[k] = std::stod(cells[5 + k]);
            t.sample_ids.push_back(cells[0]);
            t.membership.push_back(corpus::membership_from_string(cells[1]));
            t.records.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw FormatError(where + "not a number");
        } catch (const FormatError& e) {
            throw FormatError(where + e.what());
        }
    }
    return t;
}

void to_json(nlohmann::json& j, const FusionWeights& w) {
    j = {{"confidence", w.confidence}, {"entropy", w.entropy}, {"loss", w.loss}, {"vector", w.vector}};
}

void from_json(const nlohmann::json& j, FusionWeights& w) {
    w.confidence = j.at("confidence").get<double>();
    w.entropy = j.at("entropy").get<double>();
    w.loss = j.at("loss").get<double>();
    w.vector = j.at("vector").get<double>();
}

void write_fused_csv(const Matrix& fused, const std::vector<std::string>& sample_ids,
                     const std::vector<corpus::Membership>& membership, const FusionConfig& config,
                     const std::filesystem::path& path) {
    if (sample_ids.size() != fused.rows || membership.size() != fused.rows)
        throw InputError("write_fused_csv: column lengths differ");
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + path.string());
        out << "sample_id,membership";
        for (std::size_t k = 0; k < fused.cols; ++k) out << ",f" << k;
        out << '\n';
        for (std::size_t i = 0; i < fused.rows; ++i) {
            out << sample_ids[i] << ',' << corpus::to_string(membership[i]);
            for (double v : fused.row(i)) out << ',' << fmt(v);
            out << '\n';
        }
        if (!out) throw IoError("failed writing " + path.string());
    }
    nlohmann::ordered_json side;
    side["strategy"] = to_string(config.strategy);
    side["weights"] = nlohmann::json(config.weights);
    side["weights_applied"] = is_weighted(config.strategy);
    std::vector<std::string> included;
    for (auto f : kAllFeatures)
        if (config.includes(f)) included.push_back(to_string(f));
    side["features"] = included;
    side["dimension"] = fused.cols;
    std::ofstream meta(path.string() + ".json", std::ios::binary | std::ios::trunc);
    if (!meta) throw IoError("cannot open for writing: " + path.string() + ".json");
    meta << side.dump(2) << '\n';
}

}  // namespace mialab::features
