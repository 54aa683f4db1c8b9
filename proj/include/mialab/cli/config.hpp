#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mialab/attack/attack.hpp"
#include "mialab/corpus/interactions.hpp"
#include "mialab/corpus/threat_split.hpp"
#include "mialab/distill/distill.hpp"
#include "mialab/features/features.hpp"
#include "mialab/nn/model.hpp"

namespace mialab::cli {

struct CorpusSection {
    std::string name = "ml-like";  // dataset label written into metrics rows
    corpus::SynthConfig synth;     // seed is derived from the top-level seed
    std::size_t public_users = 4000;
    std::size_t vocab_size = 256;
    corpus::ThreatSplitConfig split;  // seed is derived as well
    /// Share of the attacker non-member split held back for evaluation; the
    /// rest is the attacker's background pool.
    double eval_fraction = 0.5;
    /// Evaluate on as many holdout members as evaluation non-members.
    bool balance_eval = true;

    CorpusSection();
};

struct TargetSection {
    std::size_t pretrain_epochs = 2;
    double pretrain_learning_rate = 1e-3;
    std::size_t epochs = 30;
    double learning_rate = 3e-3;
    std::size_t lora_rank = 16;  // 0 = full fine-tune
    std::size_t batch_size = 8;
};

enum class StudentInit { public_base, scratch };

struct DistillSection {
    distill::DistillConfig config;  // seed is derived
    StudentInit student_init = StudentInit::public_base;

    DistillSection();
};

struct FeaturesSection {
    features::Strategy strategy = features::Strategy::weighted_mlp;
    features::FusionWeights weights;
    bool train_upsamplers = false;
};

struct AttacksSection {
    std::vector<std::string> enabled = {"ours", "ppl", "min-k", "min-k-pp", "zlib", "shadow"};
    double min_k_percent = 20.0;
    double min_k_pp_percent = 20.0;
    attack::LogisticConfig logistic;
    attack::ShadowConfig shadow;
    /// Individual-feature, ablation, strategy and classifier studies on the
    /// reference features.
    bool studies = true;
};

struct EvalSection {
    bool separation = true;
    bool svg = true;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::string output_dir = "runs/default";
    CorpusSection corpus;
    nn::ModelConfig model;  // vocab_size is taken from the tokenizer
    TargetSection target_training;
    DistillSection distill;
    FeaturesSection features;
    AttacksSection attacks;
    EvalSection eval;
};

std::vector<std::string> attack_names();

nlohmann::ordered_json to_json(const ExperimentConfig& config);

/// Every problem found, schema and cross-field, in document order.
struct ParseResult {
    ExperimentConfig config;
    std::vector<std::string> errors;
};

/// Missing keys take their defaults; unknown keys and wrongly typed values are
/// errors.
ParseResult parse_config(const nlohmann::json& document);

/// Cross-field checks on an already parsed config.
std::vector<std::string> validate(const ExperimentConfig& config);

/// Reads, parses and validates without running anything. Empty means ok.
std::vector<std::string> validate_config(const std::filesystem::path& path);

/// Throws ConfigError listing every problem.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Threat-model presets mirroring the known-member to non-member-pool ratios
/// and label availability of four recommendation datasets.
std::vector<std::string> preset_names();
void apply_preset(ExperimentConfig& config, const std::string& preset);

std::string to_string(StudentInit s);

}  // namespace mialab::cli
