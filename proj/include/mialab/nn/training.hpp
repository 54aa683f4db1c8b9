#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mialab/nn/lora.hpp"
#include "mialab/nn/model.hpp"

namespace mialab::nn {

struct AdamConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam moments for one ParameterSet.
struct OptimizerState {
    AdamConfig config;
    Gradients first_moment;
    Gradients second_moment;
    std::uint64_t step = 0;

    static OptimizerState for_params(const ParameterSet& params, const AdamConfig& config);

    /// One Adam update. Throws InputError on shape mismatch and NumericError
    /// (naming the parameter) on a non-finite gradient; params are untouched
    /// in either case.
    void apply(ParameterSet& params, const Gradients& grads);
};

struct LossAndGradients {
    double loss = 0.0;
    Gradients gradients;
};

/// Computes the loss and gradients of `params` over a batch of dataset indices.
using BatchObjective = std::function<LossAndGradients(const ParameterSet&, std::span<const std::size_t>)>;

/// Evaluates the objective on the batch, applies one Adam update and returns
/// the pre-update loss.
double train_step(ParameterSet& params, OptimizerState& optimizer, std::span<const std::size_t> batch,
                  const BatchObjective& objective);

using TokenSequence = std::vector<TokenId>;

struct TrainOptions {
    AdamConfig adam;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    /// Called after each epoch with the epoch index and mean pre-update batch loss.
    std::function<void(std::size_t, double)> on_epoch;
};

/// Mean next-token cross-entropy and its gradient over a batch of full token
/// sequences (each sample weighted equally).
LossAndGradients lm_objective(const ModelState& model, std::span<const TokenSequence> data,
                              std::span<const std::size_t> batch);

/// Same objective with the base weights frozen; gradients are for the adapter.
LossAndGradients lm_objective_lora(const ModelState& model, const LoraAdapter& adapter,
                                   std::span<const TokenSequence> data, std::span<const std::size_t> batch);

/// Fine-tunes `model` with the language-modeling objective. With an adapter,
/// only the adapter is trained and the returned model has it merged in; the
/// adapter argument receives the trained adapter weights.
ModelState train_lm(ModelState model, std::span<const TokenSequence> data, std::size_t epochs,
                    const TrainOptions& options, LoraAdapter* adapter = nullptr);

/// Mean next-token loss of a model over a set of sequences.
double mean_lm_loss(const ModelState& model, std::span<const TokenSequence> data);

/// Seeded minibatch order for one epoch.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch);

}  // namespace mialab::nn
