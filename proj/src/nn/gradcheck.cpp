#include "mialab/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"
#include "mialab/nn/ops.hpp"
#include "mialab/nn/transformer.hpp"

namespace mialab::nn {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

double max_relative_error(DoubleParams& params, const std::function<double(const DoubleParams&)>& loss,
                          const DoubleParams& analytic, double eps, const GradCheckOptions& options) {
    if (!(eps > 0.0)) throw InputError("grad_check: eps must be > 0");
    if (analytic.size() != params.size()) throw InputError("grad_check: gradient/parameter count mismatch");
    SplitMix64 rng(options.seed);
    double worst = 0.0;
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& values = params[t];
        if (analytic[t].size() != values.size()) throw InputError("grad_check: gradient shape mismatch");
        std::vector<std::size_t> probe;
        if (values.size() <= options.samples_per_tensor) {
            for (std::size_t k = 0; k < values.size(); ++k) probe.push_back(k);
        } else {
            auto order = permutation(values.size(), rng);
            probe.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(options.samples_per_tensor));
        }
        for (std::size_t k : probe) {
            const double original = values[k];
            values[k] = original + eps;
            const double up = loss(params);
            values[k] = original - eps;
            const double down = loss(params);
            values[k] = original;
            const double numeric = (up - down) / (2.0 * eps);
            worst = std::max(worst, relative_error(analytic[t][k], numeric));
        }
    }
    return worst;
}

namespace {

DoubleParams to_double(const ModelState& model) {
    DoubleParams out;
    for (const auto& p : model.params) out.emplace_back(p.values.begin(), p.values.end());
    return out;
}

WeightView<double> double_view(const ModelState& model, const DoubleParams& params) {
    WeightView<double> w;
    w.config = model.config;
    w.binary_head = model.has_binary_head();
    for (const auto& p : params) w.tensors.push_back(p.data());
    return w;
}

void check_size(const ModelState& model, std::span<const TokenSequence> batch, const GradCheckOptions& options) {
    if (batch.empty()) throw InputError("grad_check: empty batch");
    if (model.parameter_count() > options.max_parameters)
        throw InputError("grad_check: model has " + std::to_string(model.parameter_count()) +
                         " parameters, central differences are limited to " +
                         std::to_string(options.max_parameters));
}

/// Binary head loss for label `member`, plus its gradient w.r.t. the two logits.
double binary_ce(std::span<const double> z, bool member, std::vector<double>& dz) {
    const double mx = std::max(z[0], z[1]);
    const double lse = mx + std::log(std::exp(z[0] - mx) + std::exp(z[1] - mx));
    const std::size_t label = member ? 0 : 1;
    dz = {std::exp(z[0] - lse), std::exp(z[1] - lse)};
    dz[label] -= 1.0;
    return lse - z[label];
}

}  // namespace

double gradcheck_objective(const ModelState& model, const DoubleParams& params, std::span<const TokenSequence> batch) {
    const auto view = double_view(model, params);
    double total = 0.0;
    std::vector<double> dz;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto pair = next_token_pair(batch[i]);
        const auto trace = detail::forward(view, pair.inputs);
        total += lm_loss(trace, pair.targets);
        if (view.binary_head) total += binary_ce(trace.binary_logits, i % 2 == 0, dz);
    }
    return total / static_cast<double>(batch.size());
}

DoubleParams analytic_gradients(const ModelState& model, std::span<const TokenSequence> batch) {
    const DoubleParams params = to_double(model);
    const auto view = double_view(model, params);
    DoubleParams grads;
    for (const auto& p : params) grads.emplace_back(p.size(), 0.0);
    const double inv = 1.0 / static_cast<double>(batch.size());
    std::vector<double> dlogits, dz;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto pair = next_token_pair(batch[i]);
        const auto trace = detail::forward(view, pair.inputs);
        lm_loss_with_grad(trace, pair.targets, dlogits);
        for (auto& v : dlogits) v *= inv;
        std::span<const double> dbin;
        if (view.binary_head) {
            binary_ce(trace.binary_logits, i % 2 == 0, dz);
            for (auto& v : dz) v *= inv;
            dbin = dz;
        }
        detail::backward(view, trace, std::span<const double>(dlogits), dbin, &grads,
                         static_cast<DoubleParams*>(nullptr));
    }
    return grads;
}

double compare_gradients(const ModelState& model, std::span<const TokenSequence> batch, double eps,
                         const DoubleParams& analytic, const GradCheckOptions& options) {
    check_size(model, batch, options);
    DoubleParams params = to_double(model);
    const auto loss = [&](const DoubleParams& p) { return gradcheck_objective(model, p, batch); };
    return max_relative_error(params, loss, analytic, eps, options);
}

double grad_check(const ModelState& model, std::span<const TokenSequence> batch, double eps,
                  const GradCheckOptions& options) {
    check_size(model, batch, options);
    return compare_gradients(model, batch, eps, analytic_gradients(model, batch), options);
}

}  // namespace mialab::nn
