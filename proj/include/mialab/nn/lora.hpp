#pragma once

#include <cstddef>
#include <cstdint>

#include "mialab/nn/model.hpp"

namespace mialab::nn {

/// Attention projections that carry a low-rank adapter, in storage order.
inline constexpr std::size_t kLoraTargetsPerLayer = 4;  // wq, wk, wv, wo

/// Low-rank adapter over every attention projection. For each adapted matrix W
/// (out x in) it stores A (rank x in) and B (out x rank); the effective weight
/// is W + scaling * B * A.
///
/// Parameter order: for each layer, for each of wq/wk/wv/wo, "lora_a" then
/// "lora_b". B starts at zero so a fresh adapter leaves the model unchanged.
struct LoraAdapter {
    std::size_t rank = 4;
    double scaling = 1.0;
    ParameterSet params;

    static LoraAdapter create(const ModelConfig& config, std::size_t rank, double scaling, std::uint64_t seed);

    std::size_t a_slot(std::size_t layer, std::size_t target) const { return (layer * kLoraTargetsPerLayer + target) * 2; }
    std::size_t b_slot(std::size_t layer, std::size_t target) const { return a_slot(layer, target) + 1; }

    /// scaling * B * A for one adapted matrix, row-major out x in.
    std::vector<double> delta(std::size_t layer, std::size_t target) const;
};

/// Base weights with every adapter delta folded in.
ModelState merge_lora(const ModelState& base, const LoraAdapter& adapter);

}  // namespace mialab::nn
