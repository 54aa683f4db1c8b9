#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>

#include "mialab/common/error.hpp"
#include "mialab/eval/eval.hpp"

namespace mialab::eval {

std::optional<double> auc_rank(std::span<const double> scores, std::span<const bool> truth) {
    if (scores.size() != truth.size()) throw InputError("auc: scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // U counted per tie group: positives beat every negative below the group
    // and half of the negatives inside it.
    double u = 0.0;
    std::size_t neg_below = 0, n_pos = 0, n_neg = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i, pos = 0, neg = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            if (std::isnan(scores[order[j]])) throw InputError("auc: NaN score");
            (truth[order[j]] ? pos : neg)++;
            ++j;
        }
        u += static_cast<double>(pos) * static_cast<double>(neg_below) +
             0.5 * static_cast<double>(pos) * static_cast<double>(neg);
        neg_below += neg;
        n_pos += pos;
        n_neg += neg;
        i = j;
    }
    if (n_pos == 0 || n_neg == 0) return std::nullopt;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

MetricsReport compute_metrics(const attack::AttackResult& result, const std::string& dataset, std::uint64_t seed) {
    if (result.scored.empty()) throw InputError("metrics: no scored samples for " + result.attack);
    MetricsReport r;
    r.attack = result.attack;
    r.dataset = dataset;
    r.seed = seed;
    std::vector<bool> truth;
    truth.reserve(result.scored.size());
    for (const auto& s : result.scored) {
        truth.push_back(s.truth);
        if (s.predicted && s.truth) ++r.tp;
        else if (s.predicted) ++r.fp;
        else if (s.truth) ++r.fn;
        else ++r.tn;
    }
    const double n = static_cast<double>(result.scored.size());
    r.accuracy = static_cast<double>(r.tp + r.tn) / n;
    r.recall = r.tp + r.fn == 0 ? 0.0 : static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
    const double precision = r.tp + r.fp == 0 ? 0.0 : static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
    r.f1 = precision + r.recall == 0.0 ? 0.0 : 2.0 * precision * r.recall / (precision + r.recall);
    const auto scores = result.member_scores();
    // vector<bool> has no contiguous storage; copy into a plain array for the span
    std::unique_ptr<bool[]> flags(new bool[truth.size()]);
    for (std::size_t i = 0; i < truth.size(); ++i) flags[i] = truth[i];
    r.auc = auc_rank(scores, std::span<const bool>(flags.get(), truth.size()));
    return r;
}

double silverman_bandwidth(std::span<const double> values) {
    if (values.size() < 2) throw InputError("kde: automatic bandwidth needs at least two values");
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::max(std::sqrt(ss / (n - 1.0)), 1e-8);
    return 1.06 * sd * std::pow(n, -0.2);
}

double kde_at(std::span<const double> values, double h, double x) {
    const double norm = 1.0 / (static_cast<double>(values.size()) * h * std::sqrt(2.0 * std::numbers::pi));
    double s = 0.0;
    for (double v : values) {
        const double z = (x - v) / h;
        s += std::exp(-0.5 * z * z);
    }
    return s * norm;
}

DensityCurve kde(std::span<const double> values, std::optional<double> bandwidth) {
    if (values.empty()) throw InputError("kde: no values");
    for (double v : values)
        if (!std::isfinite(v)) throw InputError("kde: non-finite value");
    DensityCurve c;
    c.bandwidth = bandwidth ? *bandwidth : silverman_bandwidth(values);
    if (!(c.bandwidth > 0.0) || !std::isfinite(c.bandwidth)) throw InputError("kde: bandwidth must be > 0");
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it - 4.0 * c.bandwidth, hi = *hi_it + 4.0 * c.bandwidth;
    c.grid.resize(kGridPoints);
    c.density.resize(kGridPoints);
    for (std::size_t i = 0; i < kGridPoints; ++i) {
        c.grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(kGridPoints - 1);
        c.density[i] = kde_at(values, c.bandwidth, c.grid[i]);
    }
    return c;
}

double integrate(const DensityCurve& c) {
    double s = 0.0;
    for (std::size_t i = 1; i < c.grid.size(); ++i)
        s += 0.5 * (c.density[i] + c.density[i - 1]) * (c.grid[i] - c.grid[i - 1]);
    return s;
}

double ks_distance(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw InputError("ks: both samples must be non-empty");
    std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    std::size_t i = 0, j = 0;
    double best = 0.0;
    while (i < x.size() || j < y.size()) {
        const double v = j >= y.size() || (i < x.size() && x[i] <= y[j]) ? x[i] : y[j];
        while (i < x.size() && x[i] == v) ++i;
        while (j < y.size() && y[j] == v) ++j;
        const double fa = static_cast<double>(i) / static_cast<double>(x.size());
        const double fb = static_cast<double>(j) / static_cast<double>(y.size());
        best = std::max(best, std::abs(fa - fb));
    }
    return best;
}

double SeparationReport::ks_of(const std::string& model, const std::string& feature) const {
    for (const auto& e : ks)
        if (e.model == model && e.feature == feature) return e.ks;
    throw InputError("separation report has no entry for " + model + "/" + feature);
}

SeparationReport separation_report(std::span<const ModelFeatures> models) {
    using features::Feature;
    SeparationReport out;
    for (const auto& m : models) {
        if (m.members.empty() || m.non_members.empty())
            throw InputError("separation report: model " + m.model + " is missing a population");
        for (auto f : {Feature::confidence, Feature::entropy, Feature::loss}) {
            auto column = [f](const std::vector<features::FeatureRecord>& rows) {
                std::vector<double> v;
                for (const auto& r : rows)
                    v.push_back(f == Feature::confidence ? r.confidence : (f == Feature::entropy ? r.entropy : r.loss));
                return v;
            };
            const auto mem = column(m.members), non = column(m.non_members);
            const std::string name = features::to_string(f);
            for (const auto& [pop, values] : {std::pair{"member", &mem}, std::pair{"non-member", &non}}) {
                auto c = kde(*values);
                c.model = m.model;
                c.feature = name;
                c.population = pop;
                out.curves.push_back(std::move(c));
            }
            out.ks.push_back({m.model, name, ks_distance(mem, non)});
        }
    }
    return out;
}

}  // namespace mialab::eval
