#pragma once

#include <span>
#include <vector>

#include "mialab/nn/transformer.hpp"

namespace mialab::nn {

/// softmax(logits / T) with max subtraction. Throws InputError for T <= 0 or
/// non-finite input.
std::vector<double> softmax_temp(std::span<const double> logits, double temperature);
std::vector<double> softmax_temp(std::span<const float> logits, double temperature);

/// log softmax of one logit row, computed in double.
template <class Real>
std::vector<double> log_softmax(std::span<const Real> logits);

/// Mean next-token cross-entropy (nats) over all positions of a trace.
/// targets[i] is the label for position i; sizes must match.
template <class Real>
double lm_loss(const BasicForwardTrace<Real>& trace, std::span<const TokenId> targets);

/// Loss and d(loss)/d(logits), where the loss is the mean over positions.
template <class Real>
double lm_loss_with_grad(const BasicForwardTrace<Real>& trace, std::span<const TokenId> targets,
                         std::vector<Real>& dlogits);

/// Splits a full token sequence into model inputs (all but last) and
/// next-token targets (all but first).
struct NextTokenPair {
    std::vector<TokenId> inputs;
    std::vector<TokenId> targets;
};
NextTokenPair next_token_pair(std::span<const TokenId> sequence);

}  // namespace mialab::nn
