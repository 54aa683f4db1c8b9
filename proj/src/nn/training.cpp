#include "mialab/nn/training.hpp"

#include <cmath>
#include <string>

#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"
#include "mialab/nn/ops.hpp"
#include "mialab/nn/transformer.hpp"

namespace mialab::nn {

OptimizerState OptimizerState::for_params(const ParameterSet& params, const AdamConfig& config) {
    if (!(config.learning_rate > 0.0)) throw ConfigError("adam: learning rate must be > 0");
    OptimizerState s;
    s.config = config;
    s.first_moment = zero_gradients(params);
    s.second_moment = zero_gradients(params);
    return s;
}

void OptimizerState::apply(ParameterSet& params, const Gradients& grads) {
    if (grads.size() != params.size() || first_moment.size() != params.size())
        throw InputError("adam: gradient/parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i].size() || first_moment[i].size() != params[i].size())
            throw InputError("adam: gradient shape mismatch for '" + params[i].name + "'");
        for (float g : grads[i])
            if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient for '" + params[i].name + "'");
    }
    ++step;
    const double b1 = config.beta1, b2 = config.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i].values;
        auto& m = first_moment[i];
        auto& v = second_moment[i];
        const auto& g = grads[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g[k];
            const double mk = b1 * m[k] + (1.0 - b1) * gk;
            const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
            m[k] = static_cast<float>(mk);
            v[k] = static_cast<float>(vk);
            const double update = config.learning_rate * (mk / c1) / (std::sqrt(vk / c2) + config.epsilon);
            w[k] = static_cast<float>(static_cast<double>(w[k]) - update);
        }
    }
}

double train_step(ParameterSet& params, OptimizerState& optimizer, std::span<const std::size_t> batch,
                  const BatchObjective& objective) {
    LossAndGradients lg = objective(params, batch);
    if (!std::isfinite(lg.loss)) throw NumericError("train_step: non-finite loss");
    optimizer.apply(params, lg.gradients);
    return lg.loss;
}

namespace {

void scale_in_place(Gradients& g, float factor) {
    for (auto& buf : g)
        for (auto& v : buf) v *= factor;
}

void add_in_place(Gradients& acc, const Gradients& g) {
    for (std::size_t i = 0; i < acc.size(); ++i)
        for (std::size_t k = 0; k < acc[i].size(); ++k) acc[i][k] += g[i][k];
}

void check_dataset(const ModelState& model, std::span<const TokenSequence> data) {
    if (data.empty()) throw InputError("train_lm: dataset is empty");
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data[i].size() < 2) throw InputError("train_lm: sample " + std::to_string(i) + " has fewer than 2 tokens");
        if (data[i].size() - 1 > model.config.max_seq_len)
            throw InputError("train_lm: sample " + std::to_string(i) + " is longer than max_seq_len");
    }
}

}  // namespace

LossAndGradients lm_objective(const ModelState& model, std::span<const TokenSequence> data,
                              std::span<const std::size_t> batch) {
    LossAndGradients out{0.0, zero_gradients(model.params)};
    std::vector<float> dlogits;
    for (std::size_t idx : batch) {
        const auto pair = next_token_pair(data[idx]);
        const auto trace = forward(model, pair.inputs);
        out.loss += lm_loss_with_grad(trace, pair.targets, dlogits);
        add_in_place(out.gradients, backward(model, trace, dlogits));
    }
    const auto inv = 1.0 / static_cast<double>(batch.size());
    out.loss *= inv;
    scale_in_place(out.gradients, static_cast<float>(inv));
    return out;
}

LossAndGradients lm_objective_lora(const ModelState& model, const LoraAdapter& adapter,
                                   std::span<const TokenSequence> data, std::span<const std::size_t> batch) {
    LossAndGradients out{0.0, zero_gradients(adapter.params)};
    std::vector<float> dlogits;
    for (std::size_t idx : batch) {
        const auto pair = next_token_pair(data[idx]);
        const auto trace = forward(model, pair.inputs, &adapter);
        out.loss += lm_loss_with_grad(trace, pair.targets, dlogits);
        add_in_place(out.gradients, backward_lora(model, adapter, trace, dlogits));
    }
    const auto inv = 1.0 / static_cast<double>(batch.size());
    out.loss *= inv;
    scale_in_place(out.gradients, static_cast<float>(inv));
    return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch) {
    if (batch_size == 0) throw ConfigError("batch size must be >= 1");
    SplitMix64 rng(derive_seed(seed, "epoch-" + std::to_string(epoch)));
    const auto order = permutation(n, rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size)
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
    return batches;
}

ModelState train_lm(ModelState model, std::span<const TokenSequence> data, std::size_t epochs,
                    const TrainOptions& options, LoraAdapter* adapter) {
    check_dataset(model, data);
    if (epochs == 0) return model;

    if (adapter) {
        OptimizerState opt = OptimizerState::for_params(adapter->params, options.adam);
        const BatchObjective objective = [&](const ParameterSet& p, std::span<const std::size_t> batch) {
            LoraAdapter view = *adapter;
            view.params = p;
            return lm_objective_lora(model, view, data, batch);
        };
        for (std::size_t e = 0; e < epochs; ++e) {
            double sum = 0.0;
            const auto batches = epoch_batches(data.size(), options.batch_size, options.seed, e);
            for (const auto& b : batches) sum += train_step(adapter->params, opt, b, objective);
            if (options.on_epoch) options.on_epoch(e, sum / static_cast<double>(batches.size()));
        }
        return merge_lora(model, *adapter);
    }

    OptimizerState opt = OptimizerState::for_params(model.params, options.adam);
    const BatchObjective objective = [&](const ParameterSet& p, std::span<const std::size_t> batch) {
        // the objective reads the live parameters; `p` aliases model.params
        (void)p;
        return lm_objective(model, data, batch);
    };
    for (std::size_t e = 0; e < epochs; ++e) {
        double sum = 0.0;
        const auto batches = epoch_batches(data.size(), options.batch_size, options.seed, e);
        for (const auto& b : batches) sum += train_step(model.params, opt, b, objective);
        if (options.on_epoch) options.on_epoch(e, sum / static_cast<double>(batches.size()));
    }
    return model;
}

double mean_lm_loss(const ModelState& model, std::span<const TokenSequence> data) {
    if (data.empty()) throw InputError("mean_lm_loss: dataset is empty");
    double total = 0.0;
    for (const auto& seq : data) {
        const auto pair = next_token_pair(seq);
        total += lm_loss(forward(model, pair.inputs), pair.targets);
    }
    return total / static_cast<double>(data.size());
}

}  // namespace mialab::nn
