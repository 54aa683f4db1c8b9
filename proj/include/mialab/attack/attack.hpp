#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mialab/features/features.hpp"
#include "mialab/nn/training.hpp"
#include "nlohmann/json_fwd.hpp"

namespace mialab::attack {

using features::Matrix;

/// A sample as an attack sees it.
struct Candidate {
    std::string sample_id;
    std::string text;           // full prompt + answer
    nn::TokenSequence tokens;   // tokenized text with end marker
    bool member = false;        // ground truth, never read by scoring code
};

// ---------------------------------------------------------------------------
// Balanced training set

struct BalancedSet {
    std::vector<std::size_t> members;      // every known member, ascending
    std::vector<std::size_t> non_members;  // as many non-members, ascending
};

/// Indices refer to the caller's member and non-member lists. Non-members are
/// drawn without replacement with a seeded shuffle.
BalancedSet balance_training_set(std::size_t n_members, std::size_t n_non_members, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Logistic attack model

struct LogisticConfig {
    double learning_rate = 0.1;
    double l2 = 1e-3;
    std::size_t max_iter = 1000;
    double tolerance = 1e-6;  // on the gradient norm
};

struct AttackModel {
    std::vector<double> weights;
    double bias = 0.0;
    std::string strategy;
    features::FusionWeights fusion_weights;
    std::uint64_t seed = 0;
    std::size_t iterations = 0;
    bool converged = false;
};

void to_json(nlohmann::json& j, const AttackModel& m);

/// Full-batch gradient descent on mean log-loss + l2/2 |w|^2, starting from
/// zero. labels: 1 member, 0 non-member. Needs two rows per class.
AttackModel train_logistic(const Matrix& x, std::span<const int> labels, const LogisticConfig& config = {});

struct Inference {
    std::vector<double> probability;
    std::vector<bool> member;
};

/// probability = logistic(w . x + b); member iff probability >= 0.5.
Inference attack_infer(const AttackModel& model, const Matrix& x);

/// Small feed-forward classifier (one ReLU hidden layer) used to probe whether
/// a more flexible attack model helps. Trained with full-batch Adam.
struct MlpClassifierConfig {
    std::size_t hidden = 32;
    double learning_rate = 1e-2;
    double l2 = 1e-3;
    std::size_t max_iter = 500;
    std::uint64_t seed = 0;
};

struct MlpClassifier {
    std::size_t in = 0, hidden = 0;
    std::vector<double> w1, b1, w2;  // hidden x in, hidden, hidden
    double b2 = 0.0;
};

MlpClassifier train_mlp_classifier(const Matrix& x, std::span<const int> labels, const MlpClassifierConfig& config);
std::vector<double> mlp_classifier_infer(const MlpClassifier& model, const Matrix& x);

/// Trains the scalar upsamplers (and compression map) of an mlp fusion
/// strategy together with the logistic model, by backpropagating the
/// logistic loss into them. Other strategies fall back to train_logistic.
struct JointModel {
    features::FusionConfig fusion;
    AttackModel model;
};
JointModel train_logistic_joint(std::span<const features::FeatureRecord> records, std::span<const int> labels,
                                const features::FusionConfig& fusion, const LogisticConfig& config = {});

// ---------------------------------------------------------------------------
// Scores

/// Whether small or large scores indicate membership.
enum class Orientation { lower_is_member, higher_is_member };

struct ScoredSample {
    std::string sample_id;
    double score = 0.0;
    bool predicted = false;
    bool truth = false;
};

struct AttackResult {
    std::string attack;
    Orientation orientation = Orientation::higher_is_member;
    double threshold = 0.0;
    std::vector<ScoredSample> scored;

    /// Scores flipped, if needed, so that larger always means "member".
    std::vector<double> member_scores() const;
};

/// Threshold rule shared by every baseline: strict comparison on the side the
/// orientation names.
bool predict_member(double score, double threshold, Orientation orientation);

/// CSV columns sample_id, score, predicted, truth.
void write_scores_csv(const AttackResult& result, const std::filesystem::path& path);
AttackResult read_scores_csv(const std::filesystem::path& path, const std::string& attack, Orientation orientation);

// ---------------------------------------------------------------------------
// Token-level statistics and threshold baselines

/// Per predicted position: log p(actual next token), and mean and standard
/// deviation of log p over the predictive distribution (expectations under p).
struct TokenStats {
    std::vector<double> log_prob;
    std::vector<double> mu;
    std::vector<double> sigma;
};
TokenStats token_stats(const nn::ModelState& model, std::span<const nn::TokenId> sequence);

/// Number of tokens in the lowest k% of n: max(1, floor(k n / 100)).
std::size_t min_k_count(std::size_t n, double k_percent);

/// Mean of the min_k_count(n, k) smallest values.
double lowest_k_mean(std::vector<double> values, double k_percent);

double min_k_score(const nn::ModelState& model, std::span<const nn::TokenId> sequence, double k_percent);
double min_k_pp_score(const nn::ModelState& model, std::span<const nn::TokenId> sequence, double k_percent);

/// DEFLATE (zlib, level 6) compressed size of the bytes.
std::size_t zlib_length(std::string_view text);
/// Total next-token NLL in nats divided by the compressed length of the text.
double zlib_score(const nn::ModelState& model, const Candidate& candidate);

double perplexity(const nn::ModelState& model, std::span<const nn::TokenId> sequence);

/// Threshold = mean score of the known members; member iff PPL below it.
AttackResult ppl_attack(const nn::ModelState& model, std::span<const Candidate> known_members,
                        std::span<const Candidate> candidates);
AttackResult min_k_attack(const nn::ModelState& model, std::span<const Candidate> known_members,
                          std::span<const Candidate> candidates, double k_percent = 20.0);
AttackResult min_k_pp_attack(const nn::ModelState& model, std::span<const Candidate> known_members,
                             std::span<const Candidate> candidates, double k_percent = 20.0);
AttackResult zlib_attack(const nn::ModelState& model, std::span<const Candidate> known_members,
                         std::span<const Candidate> candidates);

// ---------------------------------------------------------------------------
// Feature-based attacks (ours and shadow)

struct FeatureAttack {
    features::FusionConfig fusion;
    features::Standardizer standardizer;
    AttackModel model;
    std::optional<MlpClassifier> mlp;  // replaces `model` for scoring when set
};

struct FeatureAttackOptions {
    LogisticConfig logistic;
    bool train_upsamplers = false;
    bool mlp_classifier = false;
    MlpClassifierConfig mlp;
};

/// Standardizes with statistics of the training rows, fuses, and fits the
/// attack model.
FeatureAttack train_feature_attack(std::span<const features::FeatureRecord> members,
                                   std::span<const features::FeatureRecord> non_members,
                                   const features::FusionConfig& fusion, const FeatureAttackOptions& options = {});

/// Membership probabilities for raw (unstandardized) records.
std::vector<double> score_feature_attack(const FeatureAttack& attack,
                                         std::span<const features::FeatureRecord> records);

AttackResult run_feature_attack(const std::string& name, const FeatureAttack& attack,
                                std::span<const features::FeatureRecord> records,
                                std::span<const std::string> sample_ids, std::span<const bool> truth);

struct ShadowConfig {
    std::size_t epochs = 5;
    double learning_rate = 3e-3;
    std::size_t lora_rank = 16;  // 0 = full fine-tune
    std::size_t batch_size = 8;
};

void to_json(nlohmann::json& j, const ShadowConfig& c);
void from_json(const nlohmann::json& j, ShadowConfig& c);

struct ShadowAttack {
    nn::ModelState shadow;
    FeatureAttack attack;
    std::vector<std::string> shadow_members;      // ids the shadow was trained on
    std::vector<std::string> shadow_non_members;  // ids held out from the shadow
};

/// Pools the attacker's data (known members and background non-members),
/// splits it 50/50 with a seeded shuffle, fine-tunes `shadow_init` on the
/// first half and trains a feature attack on shadow features of both halves.
ShadowAttack shadow_attack(std::span<const Candidate> known_members, std::span<const Candidate> non_members,
                           const nn::ModelState& shadow_init, const ShadowConfig& config,
                           const features::FusionConfig& fusion, std::uint64_t seed,
                           const FeatureAttackOptions& options = {});

}  // namespace mialab::attack
