#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mialab/nn/training.hpp"
#include "mialab/nn/transformer.hpp"
#include "nlohmann/json_fwd.hpp"

namespace mialab::distill {

using nn::ModelState;
using nn::TokenSequence;

enum class HardLabelMode { token_ce, binary_head };

std::string to_string(HardLabelMode mode);
HardLabelMode hard_label_mode_from_string(const std::string& name);

struct DistillConfig {
    double alpha = 0.5;
    double temperature = 2.0;
    std::size_t epochs_nonmember = 5;
    std::size_t epochs_member = 5;
    HardLabelMode hard_label_mode = HardLabelMode::token_ce;
    nn::AdamConfig adam;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    /// 0 trains every student weight. Otherwise the student is trained through
    /// a low-rank adapter of this rank on its attention projections (plus the
    /// binary head, if any), merged in at the end.
    std::size_t lora_rank = 0;

    std::vector<std::string> problems() const;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

struct LossBreakdown {
    double hard = 0.0;
    double soft = 0.0;
    double combined = 0.0;
};

/// Row-wise softmax(logits / T) of a positions x vocab matrix.
std::vector<double> soft_labels(std::span<const float> teacher_logits, std::size_t vocab, double temperature);

/// T^2 * mean over positions of KL(softmax(t/T) || max(softmax(s/T), 1e-9)).
double soft_loss(std::span<const float> teacher_logits, std::span<const float> student_logits, std::size_t vocab,
                 double temperature);

/// A sample as the distiller sees it: full token sequence plus membership.
struct LabeledSequence {
    TokenSequence tokens;
    bool member = false;
};

/// token-ce: mean next-token cross-entropy of `student` against the sample's
/// own tokens. binary-head: 2-class cross-entropy of the head against
/// [1,0] for members and [0,1] for non-members.
double hard_loss(const LabeledSequence& sample, const nn::ForwardTrace& student, HardLabelMode mode);

/// alpha * hard + (1 - alpha) * soft
double member_loss(double hard, double soft, double alpha);
/// (1 - alpha) * hard + alpha * soft
double nonmember_loss(double hard, double soft, double alpha);

/// How teacher and student logits are compared when vocabularies differ:
/// both are cut to ids [0, shared) and the soft labels renormalized there.
struct VocabAlignment {
    std::size_t teacher_vocab = 0;
    std::size_t student_vocab = 0;
    std::size_t shared = 0;

    bool identity() const { return teacher_vocab == student_vocab; }

    /// First `shared` columns of each row of a positions x `from_vocab` matrix.
    std::vector<float> restrict(std::span<const float> logits, std::size_t from_vocab) const;
};

VocabAlignment truncate_vocabulary(const ModelState& teacher, const ModelState& student);

enum class Phase { nonmember, member };
std::string to_string(Phase phase);

struct BatchRecord {
    Phase phase;
    std::size_t epoch;
    std::size_t batch;
    double alpha;
    LossBreakdown loss;
};

struct EpochRecord {
    Phase phase;
    std::size_t epoch;
    LossBreakdown mean;
};

/// Everything the distiller did, in order: one entry per optimizer update and
/// one per finished epoch.
struct DistillLog {
    std::vector<BatchRecord> batches;
    std::vector<EpochRecord> epochs;

    /// CSV with columns epoch, phase, hard, soft, combined.
    void write_csv(const std::filesystem::path& path) const;
};

/// Two-phase distillation. Phase 1 trains on non-members with
/// nonmember_loss, phase 2 on members with member_loss. The teacher is only
/// read. Vocabularies must match unless an alignment is supplied.
ModelState distill(const ModelState& teacher, const ModelState& student_init,
                   std::span<const TokenSequence> nonmember_data, std::span<const TokenSequence> member_data,
                   const DistillConfig& config, const VocabAlignment* alignment = nullptr,
                   DistillLog* log = nullptr);

}  // namespace mialab::distill
