#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mialab/nn/lora.hpp"
#include "mialab/nn/model.hpp"

namespace mialab::nn {

/// Per-layer activations kept for backpropagation.
template <class Real>
struct LayerActivations {
    std::vector<Real> x_in;  // residual stream entering the layer, n x d
    std::vector<Real> ln1_xhat, ln1_rstd, ln1_out;
    std::vector<Real> q, k, v;
    std::vector<Real> lora_q, lora_k, lora_v, lora_o;  // x * A^T, n x rank (empty without adapter)
    std::vector<Real> probs;                           // heads x n x n, causal (upper triangle zero)
    std::vector<Real> attn;                            // concatenated head outputs, n x d
    std::vector<Real> x_mid;
    std::vector<Real> ln2_xhat, ln2_rstd, ln2_out;
    std::vector<Real> ff_pre, ff_act;  // n x d_ff
};

/// Result of one forward pass over a token sequence.
template <class Real>
struct BasicForwardTrace {
    ModelConfig config;
    std::size_t seq_len = 0;
    std::vector<TokenId> tokens;
    std::vector<Real> logits;                         // seq_len x vocab_size
    std::vector<std::vector<Real>> hidden_per_layer;  // n_layers entries, each seq_len x d_model
    std::vector<Real> binary_logits;                  // 2 entries when the model has a binary head

    std::vector<LayerActivations<Real>> layers;
    std::vector<Real> lnf_xhat, lnf_rstd, lnf_out;
    std::vector<Real> pooled;  // mean of the penultimate hidden rows (binary head input)

    std::span<const Real> logits_row(std::size_t pos) const {
        return {logits.data() + pos * config.vocab_size, config.vocab_size};
    }
    std::size_t penultimate_index() const { return hidden_per_layer.size() - 2; }
    const std::vector<Real>& penultimate() const { return hidden_per_layer[penultimate_index()]; }

    /// Mean over positions of one layer's hidden states.
    std::vector<Real> mean_hidden(std::size_t layer) const;
};

using ForwardTrace = BasicForwardTrace<float>;

/// Borrowed pointers to the weights of a model in some precision, in
/// ModelState::params order, plus optional adapter pointers.
template <class Real>
struct WeightView {
    ModelConfig config;
    std::vector<const Real*> tensors;
    bool binary_head = false;
    std::vector<const Real*> lora;  // LoraAdapter::params order; empty when no adapter
    std::size_t lora_rank = 0;
    Real lora_scale = 0;
};

WeightView<float> view_of(const ModelState& model, const LoraAdapter* adapter = nullptr);

namespace detail {

template <class Real>
BasicForwardTrace<Real> forward(const WeightView<Real>& w, std::span<const TokenId> tokens);

/// Backpropagates output gradients through a trace. `model_grads` is sized like
/// the view's tensors; `lora_grads` (optional) like its adapter tensors.
/// Both are accumulated into.
template <class Real>
void backward(const WeightView<Real>& w, const BasicForwardTrace<Real>& trace, std::span<const Real> dlogits,
              std::span<const Real> dbinary, std::vector<std::vector<Real>>* model_grads,
              std::vector<std::vector<Real>>* lora_grads);

}  // namespace detail

/// Causal forward pass. Throws InputError for empty/overlong input or token ids
/// outside the vocabulary and NumericError for non-finite logits.
ForwardTrace forward(const ModelState& model, std::span<const TokenId> tokens, const LoraAdapter* adapter = nullptr);

/// Gradients of the model parameters for the given output gradients.
/// `dbinary` may be empty; it must be empty when the model has no binary head.
Gradients backward(const ModelState& model, const ForwardTrace& trace, std::span<const float> dlogits,
                   std::span<const float> dbinary = {});

/// Gradients of the adapter parameters (base weights frozen). When
/// `model_grads` is given it also receives the base-model gradients.
Gradients backward_lora(const ModelState& model, const LoraAdapter& adapter, const ForwardTrace& trace,
                        std::span<const float> dlogits, std::span<const float> dbinary = {},
                        Gradients* model_grads = nullptr);

}  // namespace mialab::nn
