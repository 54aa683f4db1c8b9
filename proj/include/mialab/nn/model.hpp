#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "nlohmann/json_fwd.hpp"

namespace mialab::nn {

using TokenId = std::uint32_t;

/// Architecture of the toy decoder-only language model.
struct ModelConfig {
    std::size_t vocab_size = 256;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t max_seq_len = 128;

    /// Throws ConfigError on vocab_size < 2, n_layers < 2, max_seq_len < 2 or
    /// d_model not divisible by n_heads.
    void validate() const;

    std::size_t head_dim() const { return d_model / n_heads; }

    /// d_model = 512 preset for runs that need a 512-wide hidden vector.
    static ModelConfig wide_preset();

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Parameter {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> values;

    std::size_t size() const { return values.size(); }
};

using ParameterSet = std::vector<Parameter>;

/// One gradient buffer per parameter, same order and sizes as the ParameterSet.
using Gradients = std::vector<std::vector<float>>;

Gradients zero_gradients(const ParameterSet& params);

/// Expected (name, shape) sequence for a model. The order is the storage order
/// of ModelState::params and of checkpoint payloads.
std::vector<std::pair<std::string, std::vector<std::size_t>>> parameter_layout(const ModelConfig& config,
                                                                              bool binary_head);

/// Positions of each named tensor inside ModelState::params.
struct LayerSlots {
    std::size_t ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, b1, w2, b2;
};

struct ParamSlots {
    std::size_t tok_emb = 0;
    std::size_t pos_emb = 1;
    std::vector<LayerSlots> layers;
    std::size_t lnf_gain, lnf_bias, head_w, head_b;
    std::size_t bin_w = 0, bin_b = 0;  // valid only with a binary head
    bool binary_head = false;

    static ParamSlots for_config(const ModelConfig& config, bool binary_head);
};

/// Parameters plus architecture of one language model (teacher, student,
/// reference or shadow). Optionally carries a 2-way classification head that
/// reads the mean-pooled penultimate hidden state.
struct ModelState {
    ModelConfig config;
    ParameterSet params;

    /// Seeded random initialization.
    static ModelState initialize(const ModelConfig& config, std::uint64_t seed, bool binary_head = false);

    bool has_binary_head() const;
    ParamSlots slots() const { return ParamSlots::for_config(config, has_binary_head()); }

    const Parameter& param(std::string_view name) const;
    Parameter& param(std::string_view name);

    std::size_t parameter_count() const;

    /// Layout and finiteness check. Throws FormatError naming the offending tensor.
    void validate() const;

    bool operator==(const ModelState&) const;
};

/// Adds a freshly initialized binary head (no-op if one is present).
void attach_binary_head(ModelState& model, std::uint64_t seed);

/// Copy without the binary head.
ModelState without_binary_head(const ModelState& model);

bool operator==(const Parameter& a, const Parameter& b);

}  // namespace mialab::nn
