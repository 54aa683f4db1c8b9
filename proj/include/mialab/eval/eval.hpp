#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mialab/attack/attack.hpp"
#include "mialab/features/features.hpp"
#include "nlohmann/json_fwd.hpp"

namespace mialab::eval {

/// Member is the positive class.
struct MetricsReport {
    std::string attack;
    std::string dataset;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::optional<double> auc;  // empty when only one truth class is present
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

/// Mann-Whitney statistic with ties counted 1/2: the probability that a random
/// positive outscores a random negative. Empty when a class is absent.
std::optional<double> auc_rank(std::span<const double> scores, std::span<const bool> truth);

/// Confusion metrics from the predictions, AUC from member-oriented scores.
MetricsReport compute_metrics(const attack::AttackResult& result, const std::string& dataset, std::uint64_t seed);

struct DensityCurve {
    std::string model;
    std::string feature;
    std::string population;  // "member" or "non-member"
    double bandwidth = 0.0;
    std::vector<double> grid;
    std::vector<double> density;
};

inline constexpr std::size_t kGridPoints = 256;

/// 1.06 * sd * n^(-1/5), sd the sample standard deviation floored at 1e-8.
double silverman_bandwidth(std::span<const double> values);

/// Gaussian KDE on kGridPoints points spanning [min - 4h, max + 4h]. Without a
/// bandwidth, Silverman's rule is used (needs two values).
DensityCurve kde(std::span<const double> values, std::optional<double> bandwidth = std::nullopt);

double kde_at(std::span<const double> values, double bandwidth, double x);

/// Trapezoid rule over the curve's grid.
double integrate(const DensityCurve& curve);

/// Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|.
double ks_distance(std::span<const double> a, std::span<const double> b);

/// Feature records of one model split by population.
struct ModelFeatures {
    std::string model;
    std::vector<features::FeatureRecord> members;
    std::vector<features::FeatureRecord> non_members;
};

struct KsEntry {
    std::string model;
    std::string feature;
    double ks = 0.0;
};

struct SeparationReport {
    std::vector<DensityCurve> curves;  // model x {confidence, entropy, loss} x {member, non-member}
    std::vector<KsEntry> ks;           // model x feature

    double ks_of(const std::string& model, const std::string& feature) const;
};

SeparationReport separation_report(std::span<const ModelFeatures> models);

// ---------------------------------------------------------------------------
// Artifacts

/// Columns attack,dataset,seed,acc,recall,f1,auc,tp,fp,tn,fn; undefined AUC is "NA".
void write_metrics_csv(std::span<const MetricsReport> reports, const std::filesystem::path& path);
std::vector<MetricsReport> read_metrics_csv(const std::filesystem::path& path);

/// density_<model>_<feature>_<population>.csv with columns x,density.
std::vector<std::filesystem::path> write_density_csvs(std::span<const DensityCurve> curves,
                                                      const std::filesystem::path& dir);

/// model,feature,ks
void write_ks_csv(std::span<const KsEntry> entries, const std::filesystem::path& path);

/// One small-multiple panel per (model, feature), members and non-members overlaid.
void write_density_svg(std::span<const DensityCurve> curves, const std::filesystem::path& path);

/// Writes metrics.csv, the density CSVs and separation_ks.csv (when a
/// separation report is given), density.svg (optional) and manifest.json
/// echoing the config with its hash.
void emit_report(std::span<const MetricsReport> reports, const SeparationReport* separation,
                 const nlohmann::json& config, const std::filesystem::path& dir, bool svg = false);

/// Hex FNV-1a of the compact JSON dump (keys sorted).
std::string config_hash(const nlohmann::json& config);

/// Fixed-precision number formatting used by every CSV artifact.
std::string format_number(double v);

}  // namespace mialab::eval
