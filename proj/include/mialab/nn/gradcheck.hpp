#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mialab/nn/model.hpp"
#include "mialab/nn/training.hpp"

namespace mialab::nn {

using DoubleParams = std::vector<std::vector<double>>;

struct GradCheckOptions {
    std::size_t samples_per_tensor = 16;  // entries probed per tensor (all entries if smaller)
    std::uint64_t seed = 0;
    std::size_t max_parameters = 5000;
};

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

/// Central-difference audit of `analytic` against `loss` for an arbitrary
/// double-precision parameter set. Returns the max relative error over the
/// probed entries. `params` is perturbed in place and restored.
double max_relative_error(DoubleParams& params, const std::function<double(const DoubleParams&)>& loss,
                          const DoubleParams& analytic, double eps, const GradCheckOptions& options = {});

/// Objective probed by grad_check: mean next-token loss over the batch, plus
/// (when the model has a binary head) the mean 2-class cross-entropy of the
/// head with alternating labels.
double gradcheck_objective(const ModelState& model, const DoubleParams& params, std::span<const TokenSequence> batch);

/// Backpropagated gradient of gradcheck_objective, evaluated in double precision
/// through the same templated kernels the float model uses.
DoubleParams analytic_gradients(const ModelState& model, std::span<const TokenSequence> batch);

/// grad_check with caller-supplied analytic gradients (used to show the
/// harness flags a corrupted gradient).
double compare_gradients(const ModelState& model, std::span<const TokenSequence> batch, double eps,
                         const DoubleParams& analytic, const GradCheckOptions& options = {});

/// Max relative error between backprop and central differences.
double grad_check(const ModelState& model, std::span<const TokenSequence> batch, double eps,
                  const GradCheckOptions& options = {});

}  // namespace mialab::nn
