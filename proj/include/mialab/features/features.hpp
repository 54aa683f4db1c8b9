#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mialab/corpus/sample.hpp"
#include "mialab/corpus/tokenizer.hpp"
#include "mialab/nn/model.hpp"
#include "nlohmann/json_fwd.hpp"

namespace mialab::features {

/// Per-sample signals read off a model. Scalars are averaged over the
/// predicted positions; `vector` is the mean-pooled penultimate hidden state.
struct FeatureRecord {
    double confidence = 0.0;
    double entropy = 0.0;
    double loss = 0.0;
    std::vector<double> vector;

    bool operator==(const FeatureRecord&) const = default;
};

/// `sequence` is a full token sequence; position t predicts token t + 1.
/// Throws InputError when fewer than two tokens are given.
FeatureRecord extract_features(const nn::ModelState& model, std::span<const nn::TokenId> sequence);
FeatureRecord extract_features(const nn::ModelState& model, const corpus::Tokenizer& tokenizer,
                               const corpus::Sample& sample);

enum class Feature { confidence, entropy, loss, vector };
inline constexpr std::array<Feature, 4> kAllFeatures = {Feature::confidence, Feature::entropy, Feature::loss,
                                                        Feature::vector};
std::string to_string(Feature f);
Feature feature_from_string(const std::string& name);

enum class Strategy {
    concat,
    weighted_concat,
    sum,
    weighted_sum,
    mlp,
    weighted_mlp,
    mlp_compress,
    weighted_mlp_compress,
};
std::string to_string(Strategy s);
/// Throws ConfigError listing the valid names.
Strategy strategy_from_string(const std::string& name);
std::vector<std::string> strategy_names();
bool is_weighted(Strategy s);
Strategy unweighted(Strategy s);
Strategy weighted(Strategy s);

struct FusionWeights {
    double confidence = 0.3;
    double entropy = 0.2;
    double loss = 0.4;
    double vector = 0.1;

    double operator[](Feature f) const;
};

/// Two-layer scalar upsampler: out = W2 relu(w1 * x + b1) + b2.
struct ScalarMlp {
    std::vector<double> w1, b1;  // hidden
    std::vector<double> w2;      // out x hidden, row-major
    std::vector<double> b2;      // out

    std::size_t hidden() const { return w1.size(); }
    std::size_t out() const { return b2.size(); }

    static ScalarMlp zeros(std::size_t hidden, std::size_t out);
    /// He-style normal weights, small uniform first-layer bias, zero output bias.
    static ScalarMlp random(std::size_t hidden, std::size_t out, std::uint64_t seed);
};

/// Throws ConfigError when the layer sizes disagree.
std::vector<double> upsample_scalar(double value, const ScalarMlp& mlp);

struct FusionConfig {
    Strategy strategy = Strategy::weighted_mlp;
    FusionWeights weights;
    /// Features taking part, indexed like kAllFeatures.
    std::array<bool, 4> include = {true, true, true, true};
    std::size_t vector_dim = 0;
    std::size_t compress_dim = 0;
    std::array<ScalarMlp, 3> mlps;  // confidence, entropy, loss; used by the mlp strategies
    std::vector<double> compress;   // compress_dim x (blocks * vector_dim), mlp-compress strategies

    /// Seeded upsamplers (hidden width d/2) and compression map. compress_dim
    /// 0 means d.
    static FusionConfig make(Strategy strategy, const FusionWeights& weights, std::size_t d, std::uint64_t seed,
                             std::array<bool, 4> include = {true, true, true, true}, std::size_t compress_dim = 0);

    bool includes(Feature f) const { return include[static_cast<std::size_t>(f)]; }
    std::size_t included_count() const;
    /// Weight applied to a feature block: 1 for unweighted strategies.
    double block_weight(Feature f) const;
    std::size_t output_dim() const;
    void validate() const;
};

/// Dense row-major matrix of fused rows.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
    std::span<double> row(std::size_t i) { return {values.data() + i * cols, cols}; }
    bool operator==(const Matrix&) const = default;
};

/// One fused row per record, in record order. Output width per strategy with
/// every feature included: concat d+3, sum d+1, mlp 4d, mlp-compress d.
Matrix fuse(std::span<const FeatureRecord> records, const FusionConfig& config);
std::vector<double> fuse_row(const FeatureRecord& record, const FusionConfig& config);

/// Per-column z-scoring with statistics frozen at fit time.
class Standardizer {
public:
    static constexpr double kStdFloor = 1e-8;

    Standardizer() = default;

    /// Columns are confidence, entropy, loss, then the vector entries.
    static Standardizer fit(std::span<const FeatureRecord> training_rows);
    static Standardizer fit(const Matrix& training_rows);

    std::vector<FeatureRecord> apply(std::span<const FeatureRecord> rows) const;
    Matrix apply(const Matrix& rows) const;

    const std::vector<double>& mean() const { return mean_; }
    const std::vector<double>& scale() const { return scale_; }

private:
    Standardizer(std::vector<double> mean, std::vector<double> scale);
    std::vector<double> mean_, scale_;
};

struct FeatureTable {
    std::vector<std::string> sample_ids;
    std::vector<corpus::Membership> membership;
    std::vector<FeatureRecord> records;
};

/// CSV columns: sample_id, membership, confidence, entropy, loss, v0..v{d-1}.
void write_feature_csv(const FeatureTable& table, const std::filesystem::path& path);
FeatureTable read_feature_csv(const std::filesystem::path& path);

/// Fused rows as CSV (sample_id, membership, f0..) plus `<path>.json` echoing
/// strategy, weights and included features.
void write_fused_csv(const Matrix& fused, const std::vector<std::string>& sample_ids,
                     const std::vector<corpus::Membership>& membership, const FusionConfig& config,
                     const std::filesystem::path& path);

void to_json(nlohmann::json& j, const FusionWeights& w);
void from_json(const nlohmann::json& j, FusionWeights& w);

}  // namespace mialab::features
