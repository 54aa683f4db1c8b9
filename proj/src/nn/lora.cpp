#include "mialab/nn/lora.hpp"

#include <cmath>
#include <string>

#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"

namespace mialab::nn {

namespace {
constexpr const char* kTargetNames[kLoraTargetsPerLayer] = {"wq", "wk", "wv", "wo"};
}

LoraAdapter LoraAdapter::create(const ModelConfig& config, std::size_t rank, double scaling, std::uint64_t seed) {
    if (rank == 0) throw ConfigError("lora: rank must be >= 1");
    if (!std::isfinite(scaling)) throw ConfigError("lora: scaling must be finite");
    LoraAdapter adapter;
    adapter.rank = rank;
    adapter.scaling = scaling;
    SplitMix64 rng(seed);
    const std::size_t d = config.d_model;
    const double a_std = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        for (const char* target : kTargetNames) {
            const std::string prefix = "layers." + std::to_string(l) + ".attn." + target;
            Parameter a{prefix + ".lora_a", {rank, d}, std::vector<float>(rank * d)};
            for (auto& v : a.values) v = static_cast<float>(rng.normal() * a_std);
            Parameter b{prefix + ".lora_b", {d, rank}, std::vector<float>(d * rank, 0.0f)};
            adapter.params.push_back(std::move(a));
            adapter.params.push_back(std::move(b));
        }
    }
    return adapter;
}

std::vector<double> LoraAdapter::delta(std::size_t layer, std::size_t target) const {
    const auto& a = params.at(a_slot(layer, target));
    const auto& b = params.at(b_slot(layer, target));
    const std::size_t in = a.shape[1];
    const std::size_t out = b.shape[0];
    std::vector<double> dw(out * in, 0.0);
    for (std::size_t o = 0; o < out; ++o)
        for (std::size_t k = 0; k < rank; ++k) {
            const double bk = scaling * static_cast<double>(b.values[o * rank + k]);
            if (bk == 0.0) continue;
            for (std::size_t j = 0; j < in; ++j) dw[o * in + j] += bk * static_cast<double>(a.values[k * in + j]);
        }
    return dw;
}

ModelState merge_lora(const ModelState& base, const LoraAdapter& adapter) {
    const std::size_t expected = base.config.n_layers * kLoraTargetsPerLayer * 2;
    if (adapter.params.size() != expected) throw ConfigError("lora: adapter does not match the model's layer count");
    ModelState merged = base;
    const ParamSlots slots = merged.slots();
    for (std::size_t l = 0; l < base.config.n_layers; ++l) {
        const LayerSlots& s = slots.layers[l];
        const std::size_t targets[kLoraTargetsPerLayer] = {s.wq, s.wk, s.wv, s.wo};
        for (std::size_t t = 0; t < kLoraTargetsPerLayer; ++t) {
            const auto dw = adapter.delta(l, t);
            auto& w = merged.params[targets[t]].values;
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(static_cast<double>(w[i]) + dw[i]);
        }
    }
    return merged;
}

}  // namespace mialab::nn
