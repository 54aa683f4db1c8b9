#include "mialab/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mialab/common/error.hpp"

namespace mialab::nn {

namespace {

template <class Real>
std::vector<double> softmax_temp_impl(std::span<const Real> logits, double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature))
        throw InputError("softmax_temp: temperature must be > 0, got " + std::to_string(temperature));
    if (logits.empty()) throw InputError("softmax_temp: empty logit vector");
    double mx = -std::numeric_limits<double>::infinity();
    for (auto v : logits) {
        if (!std::isfinite(static_cast<double>(v))) throw InputError("softmax_temp: non-finite logit");
        mx = std::max(mx, static_cast<double>(v));
    }
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

}  // namespace

std::vector<double> softmax_temp(std::span<const double> logits, double temperature) {
    return softmax_temp_impl(logits, temperature);
}

std::vector<double> softmax_temp(std::span<const float> logits, double temperature) {
    return softmax_temp_impl(logits, temperature);
}

template <class Real>
std::vector<double> log_softmax(std::span<const Real> logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (auto v : logits) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (auto v : logits) sum += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
    return out;
}

template <class Real>
double lm_loss_with_grad(const BasicForwardTrace<Real>& trace, std::span<const TokenId> targets,
                         std::vector<Real>& dlogits) {
    const std::size_t n = trace.seq_len;
    const std::size_t v = trace.config.vocab_size;
    if (targets.size() != n)
        throw InputError("lm_loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                         " positions");
    dlogits.assign(n * v, Real(0));
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] >= v) throw InputError("lm_loss: target id outside the vocabulary");
        const auto lp = log_softmax(trace.logits_row(i));
        total -= lp[targets[i]];
        Real* g = dlogits.data() + i * v;
        for (std::size_t k = 0; k < v; ++k) g[k] = static_cast<Real>(std::exp(lp[k]) * inv_n);
        g[targets[i]] -= static_cast<Real>(inv_n);
    }
    return total * inv_n;
}

template <class Real>
double lm_loss(const BasicForwardTrace<Real>& trace, std::span<const TokenId> targets) {
    const std::size_t n = trace.seq_len;
    if (targets.size() != n)
        throw InputError("lm_loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                         " positions");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] >= trace.config.vocab_size) throw InputError("lm_loss: target id outside the vocabulary");
        total -= log_softmax(trace.logits_row(i))[targets[i]];
    }
    return total / static_cast<double>(n);
}

NextTokenPair next_token_pair(std::span<const TokenId> sequence) {
    if (sequence.size() < 2) throw InputError("next-token pair needs at least 2 tokens");
    return {std::vector<TokenId>(sequence.begin(), sequence.end() - 1),
            std::vector<TokenId>(sequence.begin() + 1, sequence.end())};
}

template std::vector<double> log_softmax<float>(std::span<const float>);
template std::vector<double> log_softmax<double>(std::span<const double>);
template double lm_loss<float>(const BasicForwardTrace<float>&, std::span<const TokenId>);
template double lm_loss<double>(const BasicForwardTrace<double>&, std::span<const TokenId>);
template double lm_loss_with_grad<float>(const BasicForwardTrace<float>&, std::span<const TokenId>,
                                         std::vector<float>&);
template double lm_loss_with_grad<double>(const BasicForwardTrace<double>&, std::span<const TokenId>,
                                          std::vector<double>&);

}  // namespace mialab::nn
