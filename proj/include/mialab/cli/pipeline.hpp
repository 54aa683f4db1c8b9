#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mialab/cli/config.hpp"
#include "mialab/eval/eval.hpp"

namespace mialab::cli {

enum class Stage { gen_data, train_target, distill, extract, attack, evaluate };

inline constexpr std::array<Stage, 6> kStages = {Stage::gen_data, Stage::train_target, Stage::distill,
                                                 Stage::extract,  Stage::attack,       Stage::evaluate};

std::string to_string(Stage s);
/// Throws ConfigError listing the stage names.
Stage stage_from_string(const std::string& name);

/// Seed of one stage: the top-level seed with the stage name hashed in.
std::uint64_t stage_seed(std::uint64_t seed, Stage stage);

/// Role of a sample in the attack protocol, as written to roles.csv.
enum class Role {
    known,             // attacker-known member
    background,        // attacker non-member used for distillation and attack training
    eval_non_member,   // held back for evaluation
    eval_member,       // holdout member evaluated against eval_non_member
    holdout,           // holdout member not evaluated (balancing leftover)
};
std::string to_string(Role r);

struct RunOptions {
    /// Directory holding gen-data and train-target instead of output_dir, so
    /// several runs can share one corpus and one target model.
    std::filesystem::path shared_root;
    /// Skip stages whose recorded key, upstream and outputs still match.
    bool reuse = false;
    /// Take the output_dir lock. Nested runs of an already locked tree skip it.
    bool lock = true;
    /// Progress lines; null silences them.
    std::ostream* log = nullptr;
};

std::filesystem::path stage_dir(const ExperimentConfig& config, Stage stage, const RunOptions& options = {});

/// Hash of the config sections a stage (and everything upstream) reads.
std::string stage_key(const ExperimentConfig& config, Stage stage);

/// Throws PrerequisiteError naming the first upstream stage that is missing
/// or stale.
void check_prerequisites(const ExperimentConfig& config, Stage stage, const RunOptions& options = {});

/// True when the stage's recorded outputs match the current config and upstream.
bool up_to_date(const ExperimentConfig& config, Stage stage, const RunOptions& options = {});

/// Runs one stage after checking its prerequisites. Outputs go to
/// stage_dir(config, stage) together with stage.json.
void run_stage(const ExperimentConfig& config, Stage stage, const RunOptions& options = {});

struct RunSummary {
    std::vector<eval::MetricsReport> metrics;  // enabled attacks, in config order
    std::vector<eval::MetricsReport> studies;  // empty unless studies are on
};

/// Every stage in order, then the metrics table on the log stream. Stage
/// errors are rethrown with the stage name prefixed.
RunSummary run_full(const ExperimentConfig& config, const RunOptions& options = {});

/// Reads evaluate/metrics.csv and studies.csv of a finished run.
RunSummary read_summary(const ExperimentConfig& config, const RunOptions& options = {});

struct SweepRow {
    double alpha = 0.0;
    eval::MetricsReport metrics;  // the "ours" row of the sub-run
};

/// alpha = 0.0, 0.1, ..., 1.0. Sub-runs live in output_dir/alpha-<a> and share
/// gen-data and train-target under output_dir. Writes output_dir/sweep.csv.
std::vector<SweepRow> run_alpha_sweep(const ExperimentConfig& config, const RunOptions& options = {});

void print_metrics_table(std::span<const eval::MetricsReport> rows, std::ostream& out);

}  // namespace mialab::cli
