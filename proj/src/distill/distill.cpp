#include "mialab/distill/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"
#include "mialab/nn/ops.hpp"

namespace mialab::distill {

std::string to_string(HardLabelMode mode) { return mode == HardLabelMode::token_ce ? "token-ce" : "binary-head"; }

HardLabelMode hard_label_mode_from_string(const std::string& name) {
    if (name == "token-ce") return HardLabelMode::token_ce;
    if (name == "binary-head") return HardLabelMode::binary_head;
    throw ConfigError("unknown hard_label_mode '" + name + "' (expected token-ce or binary-head)");
}

std::string to_string(Phase phase) { return phase == Phase::nonmember ? "non-member" : "member"; }

std::vector<std::string> DistillConfig::problems() const {
    std::vector<std::string> out;
    if (!(alpha >= 0.0 && alpha <= 1.0))
        out.push_back("alpha must be in [0, 1] (it weighs hard against soft loss), got " + std::to_string(alpha));
    if (!(temperature > 0.0) || !std::isfinite(temperature)) out.push_back("temperature must be > 0");
    if (!(adam.learning_rate > 0.0)) out.push_back("learning_rate must be > 0");
    if (batch_size < 1) out.push_back("batch_size must be >= 1");
    return out;
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
    j = {{"alpha", c.alpha},
         {"temperature", c.temperature},
         {"epochs_nonmember", c.epochs_nonmember},
         {"epochs_member", c.epochs_member},
         {"hard_label_mode", to_string(c.hard_label_mode)},
         {"learning_rate", c.adam.learning_rate},
         {"batch_size", c.batch_size},
         {"seed", c.seed},
         {"lora_rank", c.lora_rank}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
    c.alpha = j.at("alpha").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.epochs_nonmember = j.at("epochs_nonmember").get<std::size_t>();
    c.epochs_member = j.at("epochs_member").get<std::size_t>();
    c.hard_label_mode = hard_label_mode_from_string(j.at("hard_label_mode").get<std::string>());
    c.adam.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.lora_rank = j.at("lora_rank").get<std::size_t>();
}

namespace {

constexpr double kProbFloor = 1e-9;

void check_temperature(double t) {
    if (!(t > 0.0) || !std::isfinite(t)) throw InputError("temperature must be > 0, got " + std::to_string(t));
}

std::size_t rows_of(std::span<const float> logits, std::size_t vocab) {
    if (vocab == 0 || logits.size() % vocab != 0)
        throw InputError("logit matrix size " + std::to_string(logits.size()) + " is not a multiple of vocab " +
                         std::to_string(vocab));
    return logits.size() / vocab;
}

/// KL of one position; writes d(KL)/d(student logits) * T into `grad` when given.
double position_kl(std::span<const double> p_teacher, std::span<const float> student_row, double t,
                   double* grad) {
    const auto q = nn::softmax_temp(student_row, t);
    double kl = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
        const double p = p_teacher[k];
        if (p > 0.0) kl += p * (std::log(p) - std::log(std::max(q[k], kProbFloor)));
        if (grad) grad[k] = q[k] - p;
    }
    return kl;
}

double binary_ce(std::span<const float> z, bool member, double* grad) {
    if (z.size() != 2) throw ConfigError("binary-head hard loss needs a model with a binary head");
    const double a = z[0], b = z[1];
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    const std::size_t label = member ? 0 : 1;
    if (grad) {
        grad[0] = std::exp(a - lse) - (label == 0 ? 1.0 : 0.0);
        grad[1] = std::exp(b - lse) - (label == 1 ? 1.0 : 0.0);
    }
    return lse - (label == 0 ? a : b);
}

void accumulate(nn::Gradients& acc, const nn::Gradients& g) {
    for (std::size_t t = 0; t < acc.size(); ++t)
        for (std::size_t k = 0; k < acc[t].size(); ++k) acc[t][k] += g[t][k];
}

}  // namespace

std::vector<double> soft_labels(std::span<const float> teacher_logits, std::size_t vocab, double temperature) {
    check_temperature(temperature);
    const std::size_t n = rows_of(teacher_logits, vocab);
    std::vector<double> out;
    out.reserve(teacher_logits.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = nn::softmax_temp(teacher_logits.subspan(i * vocab, vocab), temperature);
        out.insert(out.end(), row.begin(), row.end());
    }
    return out;
}

double soft_loss(std::span<const float> teacher_logits, std::span<const float> student_logits, std::size_t vocab,
                 double temperature) {
    check_temperature(temperature);
    if (teacher_logits.size() != student_logits.size())
        throw InputError("soft_loss: teacher has " + std::to_string(teacher_logits.size()) +
                         " logits, student has " + std::to_string(student_logits.size()));
    const std::size_t n = rows_of(teacher_logits, vocab);
    if (n == 0) throw InputError("soft_loss: no positions");
    const auto p = soft_labels(teacher_logits, vocab, temperature);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        total += position_kl(std::span<const double>(p).subspan(i * vocab, vocab),
                             student_logits.subspan(i * vocab, vocab), temperature, nullptr);
    return temperature * temperature * total / static_cast<double>(n);
}

double hard_loss(const LabeledSequence& sample, const nn::ForwardTrace& student, HardLabelMode mode) {
    if (mode == HardLabelMode::binary_head) {
        if (student.binary_logits.size() != 2)
            throw ConfigError("hard_label_mode binary-head requires a student with a binary head");
        return binary_ce(student.binary_logits, sample.member, nullptr);
    }
    const auto pair = nn::next_token_pair(sample.tokens);
    return nn::lm_loss(student, pair.targets);
}

double member_loss(double hard, double soft, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("alpha must be in [0, 1]");
    return alpha * hard + (1.0 - alpha) * soft;
}

double nonmember_loss(double hard, double soft, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("alpha must be in [0, 1]");
    return (1.0 - alpha) * hard + alpha * soft;
}

std::vector<float> VocabAlignment::restrict(std::span<const float> logits, std::size_t from_vocab) const {
    const std::size_t n = rows_of(logits, from_vocab);
    if (from_vocab < shared) throw InputError("restrict: source vocabulary smaller than the shared range");
    std::vector<float> out;
    out.reserve(n * shared);
    for (std::size_t i = 0; i < n; ++i)
        out.insert(out.end(), logits.begin() + static_cast<std::ptrdiff_t>(i * from_vocab),
                   logits.begin() + static_cast<std::ptrdiff_t>(i * from_vocab + shared));
    return out;
}

VocabAlignment truncate_vocabulary(const ModelState& teacher, const ModelState& student) {
    teacher.config.validate();
    student.config.validate();
    VocabAlignment a;
    a.teacher_vocab = teacher.config.vocab_size;
    a.student_vocab = student.config.vocab_size;
    a.shared = std::min(a.teacher_vocab, a.student_vocab);
    if (a.shared < 2) throw InputError("truncate_vocabulary: shared vocabulary must have at least 2 ids");
    return a;
}

void DistillLog::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "epoch,phase,hard,soft,combined\n";
    char buf[160];
    for (const auto& e : epochs) {
        std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g\n", e.epoch, to_string(e.phase).c_str(), e.mean.hard,
                      e.mean.soft, e.mean.combined);
        out << buf;
    }
    if (!out) throw IoError("failed writing " + path.string());
}

namespace {

class Distiller {
public:
    Distiller(const ModelState& teacher, const DistillConfig& cfg, const VocabAlignment& align, DistillLog* log)
        : teacher_(teacher), cfg_(cfg), align_(align), log_(log) {}

    /// Trains `student` in place, or `adapter` (and the student's binary head)
    /// when one is given.
    void run_phase(ModelState& student, nn::LoraAdapter* adapter, std::span<const TokenSequence> data, Phase phase,
                   std::size_t epochs) {
        if (epochs == 0) return;
        const bool member = phase == Phase::member;
        const auto labels = teacher_labels(data);
        const std::uint64_t seed = derive_seed(cfg_.seed, member ? "distill-member" : "distill-nonmember");
        const double w_hard = member ? cfg_.alpha : 1.0 - cfg_.alpha;
        const double w_soft = member ? 1.0 - cfg_.alpha : cfg_.alpha;

        // trainable tensors: the whole student, or adapter + binary head
        std::vector<std::size_t> head_slots;
        if (adapter && student.has_binary_head()) {
            const auto slots = student.slots();
            head_slots = {slots.bin_w, slots.bin_b};
        }
        nn::ParameterSet adapter_trainable;
        if (adapter) {
            adapter_trainable = adapter->params;
            for (auto slot : head_slots) adapter_trainable.push_back(student.params[slot]);
        }
        nn::ParameterSet& trainable = adapter ? adapter_trainable : student.params;
        nn::OptimizerState opt = nn::OptimizerState::for_params(trainable, cfg_.adam);

        for (std::size_t e = 0; e < epochs; ++e) {
            const auto batches = nn::epoch_batches(data.size(), cfg_.batch_size, seed, e);
            LossBreakdown sum;
            for (std::size_t b = 0; b < batches.size(); ++b) {
                LossBreakdown batch_loss;
                const nn::BatchObjective objective = [&](const nn::ParameterSet& p, std::span<const std::size_t> idx) {
                    if (adapter) sync(p, student, *adapter, head_slots);
                    return batch_objective(student, adapter, head_slots, data, labels, idx, member, w_hard, w_soft,
                                           batch_loss);
                };
                nn::train_step(trainable, opt, batches[b], objective);
                batch_loss.combined = member ? member_loss(batch_loss.hard, batch_loss.soft, cfg_.alpha)
                                             : nonmember_loss(batch_loss.hard, batch_loss.soft, cfg_.alpha);
                if (log_) log_->batches.push_back({phase, e, b, cfg_.alpha, batch_loss});
                sum.hard += batch_loss.hard;
                sum.soft += batch_loss.soft;
                sum.combined += batch_loss.combined;
            }
            const double inv = 1.0 / static_cast<double>(batches.size());
            if (log_) log_->epochs.push_back({phase, e, {sum.hard * inv, sum.soft * inv, sum.combined * inv}});
        }
        if (adapter) sync(trainable, student, *adapter, head_slots);
    }

private:
    static void sync(const nn::ParameterSet& p, ModelState& student, nn::LoraAdapter& adapter,
                     const std::vector<std::size_t>& head_slots) {
        const std::size_t k = adapter.params.size();
        for (std::size_t t = 0; t < k; ++t) adapter.params[t].values = p[t].values;
        for (std::size_t h = 0; h < head_slots.size(); ++h) student.params[head_slots[h]].values = p[k + h].values;
    }

    /// Teacher soft labels over the shared vocabulary, one matrix per sample.
    /// The teacher is fixed, so this is computed once per phase.
    std::vector<std::vector<double>> teacher_labels(std::span<const TokenSequence> data) const {
        std::vector<std::vector<double>> out;
        out.reserve(data.size());
        for (const auto& seq : data) {
            const auto pair = nn::next_token_pair(seq);
            const auto trace = nn::forward(teacher_, pair.inputs);
            if (align_.identity()) {
                out.push_back(soft_labels(trace.logits, align_.shared, cfg_.temperature));
            } else {
                out.push_back(
                    soft_labels(align_.restrict(trace.logits, align_.teacher_vocab), align_.shared, cfg_.temperature));
            }
        }
        return out;
    }

    nn::LossAndGradients batch_objective(const ModelState& student, const nn::LoraAdapter* adapter,
                                         const std::vector<std::size_t>& head_slots,
                                         std::span<const TokenSequence> data,
                                         const std::vector<std::vector<double>>& labels,
                                         std::span<const std::size_t> idx, bool member, double w_hard, double w_soft,
                                         LossBreakdown& out) const {
        const double t = cfg_.temperature;
        const double inv_batch = 1.0 / static_cast<double>(idx.size());
        const std::size_t vs = student.config.vocab_size;
        nn::LossAndGradients result;
        if (adapter) {
            result.gradients = nn::zero_gradients(adapter->params);
            for (auto slot : head_slots) result.gradients.emplace_back(student.params[slot].size(), 0.0f);
        } else {
            result.gradients = nn::zero_gradients(student.params);
        }
        out = {};
        std::vector<double> kl_grad(align_.shared);
        for (std::size_t i : idx) {
            const auto pair = nn::next_token_pair(data[i]);
            const auto trace = nn::forward(student, pair.inputs, adapter);
            const std::size_t n = trace.seq_len;
            const auto& p = labels[i];

            std::vector<float> dlogits(n * vs, 0.0f);
            std::vector<float> dbinary;
            double hard = 0.0;
            if (cfg_.hard_label_mode == HardLabelMode::token_ce) {
                std::vector<float> dh;
                hard = nn::lm_loss_with_grad(trace, pair.targets, dh);
                for (std::size_t k = 0; k < dh.size(); ++k)
                    dlogits[k] += static_cast<float>(w_hard * inv_batch * dh[k]);
            } else {
                double g[2];
                hard = binary_ce(trace.binary_logits, member, g);
                dbinary = {static_cast<float>(w_hard * inv_batch * g[0]),
                           static_cast<float>(w_hard * inv_batch * g[1])};
            }

            double kl_sum = 0.0;
            const double soft_scale = w_soft * inv_batch * t / static_cast<double>(n);
            for (std::size_t pos = 0; pos < n; ++pos) {
                const auto row = trace.logits_row(pos).first(align_.shared);
                kl_sum += position_kl(std::span<const double>(p).subspan(pos * align_.shared, align_.shared), row, t,
                                      kl_grad.data());
                float* d = dlogits.data() + pos * vs;
                for (std::size_t k = 0; k < align_.shared; ++k) d[k] += static_cast<float>(soft_scale * kl_grad[k]);
            }
            const double soft = t * t * kl_sum / static_cast<double>(n);

            out.hard += hard * inv_batch;
            out.soft += soft * inv_batch;
            result.loss += (w_hard * hard + w_soft * soft) * inv_batch;
            if (adapter) {
                nn::Gradients model_grads;
                auto g = nn::backward_lora(student, *adapter, trace, dlogits, dbinary,
                                           head_slots.empty() ? nullptr : &model_grads);
                for (auto slot : head_slots) g.push_back(std::move(model_grads[slot]));
                accumulate(result.gradients, g);
            } else {
                accumulate(result.gradients, nn::backward(student, trace, dlogits, dbinary));
            }
        }
        if (!std::isfinite(result.loss)) throw NumericError("distillation loss is not finite");
        return result;
    }

    const ModelState& teacher_;
    const DistillConfig& cfg_;
    VocabAlignment align_;
    DistillLog* log_;
};

}  // namespace

ModelState distill(const ModelState& teacher, const ModelState& student_init,
                   std::span<const TokenSequence> nonmember_data, std::span<const TokenSequence> member_data,
                   const DistillConfig& config, const VocabAlignment* alignment, DistillLog* log) {
    if (const auto errs = config.problems(); !errs.empty()) throw ConfigError("distill: " + errs.front());
    if (nonmember_data.empty() || member_data.empty())
        throw InputError("distill: both non-member and member data must be non-empty");
    VocabAlignment align;
    if (alignment) {
        align = *alignment;
        if (align.teacher_vocab != teacher.config.vocab_size || align.student_vocab != student_init.config.vocab_size)
            throw ConfigError("distill: the vocabulary alignment was built for different models");
    } else {
        if (teacher.config.vocab_size != student_init.config.vocab_size)
            throw ConfigError("distill: teacher vocabulary (" + std::to_string(teacher.config.vocab_size) +
                              ") differs from student vocabulary (" +
                              std::to_string(student_init.config.vocab_size) +
                              "); align them with truncate_vocabulary first");
        align = truncate_vocabulary(teacher, student_init);
    }
    if (config.hard_label_mode == HardLabelMode::binary_head && !student_init.has_binary_head())
        throw ConfigError("distill: hard_label_mode binary-head requires a student with a binary head");

    ModelState student = student_init;
    Distiller d(teacher, config, align, log);
    if (config.lora_rank == 0) {
        d.run_phase(student, nullptr, nonmember_data, Phase::nonmember, config.epochs_nonmember);
        d.run_phase(student, nullptr, member_data, Phase::member, config.epochs_member);
        return student;
    }
    if (config.epochs_nonmember == 0 && config.epochs_member == 0) return student;
    auto adapter = nn::LoraAdapter::create(student.config, config.lora_rank, 1.0, derive_seed(config.seed, "distill-lora"));
    d.run_phase(student, &adapter, nonmember_data, Phase::nonmember, config.epochs_nonmember);
    d.run_phase(student, &adapter, member_data, Phase::member, config.epochs_member);
    return nn::merge_lora(student, adapter);
}

}  // namespace mialab::distill
