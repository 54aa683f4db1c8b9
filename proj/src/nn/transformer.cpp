#include "mialab/nn/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mialab/common/error.hpp"

namespace mialab::nn {

namespace {

constexpr double kLayerNormEps = 1e-5;

template <class Real>
Real dot(const Real* a, const Real* b, std::size_t n) {
    Real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    for (; j < n; ++j) s0 += a[j] * b[j];
    return (s0 + s1) + (s2 + s3);
}

template <class Real>
void axpy(Real alpha, const Real* x, Real* y, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) y[j] += alpha * x[j];
}

/// y (n x out) = x (n x in) * W^T + b
template <class Real>
void linear_forward(const Real* x, std::size_t n, std::size_t in, const Real* w, std::size_t out, const Real* b,
                    Real* y) {
    for (std::size_t i = 0; i < n; ++i) {
        const Real* xi = x + i * in;
        Real* yi = y + i * out;
        for (std::size_t o = 0; o < out; ++o) yi[o] = dot(w + o * in, xi, in) + (b ? b[o] : Real(0));
    }
}

/// Accumulates dx += dy * W, dW += dy^T x, db += colsum(dy). Null outputs are skipped.
template <class Real>
void linear_backward(const Real* dy, const Real* x, std::size_t n, std::size_t in, const Real* w, std::size_t out,
                     Real* dx, Real* dw, Real* db) {
    for (std::size_t i = 0; i < n; ++i) {
        const Real* dyi = dy + i * out;
        const Real* xi = x + i * in;
        for (std::size_t o = 0; o < out; ++o) {
            const Real g = dyi[o];
            if (g == Real(0)) continue;
            if (dx) axpy(g, w + o * in, dx + i * in, in);
            if (dw) axpy(g, xi, dw + o * in, in);
            if (db) db[o] += g;
        }
    }
}

/// y += scale * (x A^T) B^T, storing x A^T in `xa`.
template <class Real>
void lora_forward(const Real* x, std::size_t n, std::size_t d, const Real* a, const Real* b, std::size_t rank,
                  Real scale, std::vector<Real>& xa, Real* y) {
    xa.assign(n * rank, Real(0));
    linear_forward(x, n, d, a, rank, static_cast<const Real*>(nullptr), xa.data());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < d; ++o) y[i * d + o] += scale * dot(b + o * rank, xa.data() + i * rank, rank);
}

template <class Real>
void lora_backward(const Real* dy, const Real* x, std::size_t n, std::size_t d, const Real* a, const Real* b,
                   std::size_t rank, Real scale, const std::vector<Real>& xa, Real* dx, Real* da, Real* db) {
    std::vector<Real> dxa(n * rank, Real(0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t o = 0; o < d; ++o) {
            const Real g = scale * dy[i * d + o];
            if (g == Real(0)) continue;
            if (db) axpy(g, xa.data() + i * rank, db + o * rank, rank);
            axpy(g, b + o * rank, dxa.data() + i * rank, rank);
        }
    }
    linear_backward(dxa.data(), x, n, d, a, rank, dx, da, static_cast<Real*>(nullptr));
}

template <class Real>
void layer_norm_forward(const Real* x, std::size_t n, std::size_t d, const Real* gain, const Real* bias,
                        std::vector<Real>& xhat, std::vector<Real>& rstd, std::vector<Real>& out) {
    xhat.resize(n * d);
    rstd.resize(n);
    out.resize(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        const Real* xi = x + i * d;
        Real mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += xi[j];
        mean /= static_cast<Real>(d);
        Real var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= static_cast<Real>(d);
        const Real r = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
        rstd[i] = r;
        for (std::size_t j = 0; j < d; ++j) {
            const Real h = (xi[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = gain[j] * h + bias[j];
        }
    }
}

/// dx += LN'(dy); dgain/dbias accumulated when non-null.
template <class Real>
void layer_norm_backward(const Real* dy, const std::vector<Real>& xhat, const std::vector<Real>& rstd, std::size_t n,
                         std::size_t d, const Real* gain, Real* dx, Real* dgain, Real* dbias) {
    std::vector<Real> dxhat(d);
    for (std::size_t i = 0; i < n; ++i) {
        const Real* dyi = dy + i * d;
        const Real* hi = xhat.data() + i * d;
        Real mean_dxhat = 0, mean_dxhat_h = 0;
        for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = dyi[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_h += dxhat[j] * hi[j];
            if (dgain) dgain[j] += dyi[j] * hi[j];
            if (dbias) dbias[j] += dyi[j];
        }
        mean_dxhat /= static_cast<Real>(d);
        mean_dxhat_h /= static_cast<Real>(d);
        for (std::size_t j = 0; j < d; ++j)
            dx[i * d + j] += rstd[i] * (dxhat[j] - mean_dxhat - hi[j] * mean_dxhat_h);
    }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <class Real>
Real gelu(Real u) {
    const Real t = std::tanh(static_cast<Real>(kGeluC) * (u + static_cast<Real>(kGeluA) * u * u * u));
    return Real(0.5) * u * (Real(1) + t);
}

template <class Real>
Real gelu_grad(Real u) {
    const Real c = static_cast<Real>(kGeluC), a = static_cast<Real>(kGeluA);
    const Real t = std::tanh(c * (u + a * u * u * u));
    return Real(0.5) * (Real(1) + t) + Real(0.5) * u * (Real(1) - t * t) * c * (Real(1) + Real(3) * a * u * u);
}

template <class Real>
Real* grad_ptr(std::vector<std::vector<Real>>* grads, std::size_t slot) {
    return grads ? (*grads)[slot].data() : nullptr;
}

}  // namespace

template <class Real>
std::vector<Real> BasicForwardTrace<Real>::mean_hidden(std::size_t layer) const {
    const std::size_t d = config.d_model;
    std::vector<Real> out(d, Real(0));
    const auto& h = hidden_per_layer.at(layer);
    for (std::size_t i = 0; i < seq_len; ++i) axpy(Real(1), h.data() + i * d, out.data(), d);
    for (auto& v : out) v /= static_cast<Real>(seq_len);
    return out;
}

WeightView<float> view_of(const ModelState& model, const LoraAdapter* adapter) {
    WeightView<float> w;
    w.config = model.config;
    w.binary_head = model.has_binary_head();
    w.tensors.reserve(model.params.size());
    for (const auto& p : model.params) w.tensors.push_back(p.values.data());
    if (adapter) {
        for (const auto& p : adapter->params) w.lora.push_back(p.values.data());
        w.lora_rank = adapter->rank;
        w.lora_scale = static_cast<float>(adapter->scaling);
    }
    return w;
}

namespace detail {

template <class Real>
BasicForwardTrace<Real> forward(const WeightView<Real>& w, std::span<const TokenId> tokens) {
    const ModelConfig& c = w.config;
    const std::size_t n = tokens.size();
    const std::size_t d = c.d_model;
    const std::size_t heads = c.n_heads;
    const std::size_t hd = c.head_dim();
    const std::size_t ff = c.d_ff;
    const ParamSlots slots = ParamSlots::for_config(c, w.binary_head);
    const bool lora = !w.lora.empty();
    const std::size_t r = w.lora_rank;
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));

    BasicForwardTrace<Real> t;
    t.config = c;
    t.seq_len = n;
    t.tokens.assign(tokens.begin(), tokens.end());

    std::vector<Real> x(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        const Real* te = w.tensors[slots.tok_emb] + static_cast<std::size_t>(tokens[i]) * d;
        const Real* pe = w.tensors[slots.pos_emb] + i * d;
        for (std::size_t j = 0; j < d; ++j) x[i * d + j] = te[j] + pe[j];
    }

    t.layers.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const LayerSlots& s = slots.layers[l];
        auto& a = t.layers[l];
        a.x_in = x;
        layer_norm_forward(x.data(), n, d, w.tensors[s.ln1_gain], w.tensors[s.ln1_bias], a.ln1_xhat, a.ln1_rstd,
                           a.ln1_out);
        a.q.assign(n * d, Real(0));
        a.k.assign(n * d, Real(0));
        a.v.assign(n * d, Real(0));
        linear_forward(a.ln1_out.data(), n, d, w.tensors[s.wq], d, static_cast<const Real*>(nullptr), a.q.data());
        linear_forward(a.ln1_out.data(), n, d, w.tensors[s.wk], d, static_cast<const Real*>(nullptr), a.k.data());
        linear_forward(a.ln1_out.data(), n, d, w.tensors[s.wv], d, static_cast<const Real*>(nullptr), a.v.data());
        if (lora) {
            const std::size_t base = l * kLoraTargetsPerLayer * 2;
            lora_forward(a.ln1_out.data(), n, d, w.lora[base + 0], w.lora[base + 1], r, w.lora_scale, a.lora_q,
                         a.q.data());
            lora_forward(a.ln1_out.data(), n, d, w.lora[base + 2], w.lora[base + 3], r, w.lora_scale, a.lora_k,
                         a.k.data());
            lora_forward(a.ln1_out.data(), n, d, w.lora[base + 4], w.lora[base + 5], r, w.lora_scale, a.lora_v,
                         a.v.data());
        }

        a.probs.assign(heads * n * n, Real(0));
        a.attn.assign(n * d, Real(0));
        std::vector<Real> scores(n);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < n; ++i) {
                Real mx = -std::numeric_limits<Real>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    scores[j] = dot(a.q.data() + i * d + off, a.k.data() + j * d + off, hd) * scale;
                    mx = std::max(mx, scores[j]);
                }
                Real sum = 0;
                for (std::size_t j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    sum += scores[j];
                }
                Real* p = a.probs.data() + (h * n + i) * n;
                Real* o = a.attn.data() + i * d + off;
                for (std::size_t j = 0; j <= i; ++j) {
                    p[j] = scores[j] / sum;
                    axpy(p[j], a.v.data() + j * d + off, o, hd);
                }
            }
        }

        std::vector<Real> proj(n * d);
        linear_forward(a.attn.data(), n, d, w.tensors[s.wo], d, static_cast<const Real*>(nullptr), proj.data());
        if (lora) {
            const std::size_t base = l * kLoraTargetsPerLayer * 2;
            lora_forward(a.attn.data(), n, d, w.lora[base + 6], w.lora[base + 7], r, w.lora_scale, a.lora_o,
                         proj.data());
        }
        a.x_mid.resize(n * d);
        for (std::size_t i = 0; i < n * d; ++i) a.x_mid[i] = x[i] + proj[i];

        layer_norm_forward(a.x_mid.data(), n, d, w.tensors[s.ln2_gain], w.tensors[s.ln2_bias], a.ln2_xhat,
                           a.ln2_rstd, a.ln2_out);
        a.ff_pre.resize(n * ff);
        linear_forward(a.ln2_out.data(), n, d, w.tensors[s.w1], ff, w.tensors[s.b1], a.ff_pre.data());
        a.ff_act.resize(n * ff);
        for (std::size_t i = 0; i < n * ff; ++i) a.ff_act[i] = gelu(a.ff_pre[i]);
        std::vector<Real> ff_out(n * d);
        linear_forward(a.ff_act.data(), n, ff, w.tensors[s.w2], d, w.tensors[s.b2], ff_out.data());
        for (std::size_t i = 0; i < n * d; ++i) x[i] = a.x_mid[i] + ff_out[i];
        t.hidden_per_layer.push_back(x);
    }

    layer_norm_forward(x.data(), n, d, w.tensors[slots.lnf_gain], w.tensors[slots.lnf_bias], t.lnf_xhat, t.lnf_rstd,
                       t.lnf_out);
    t.logits.resize(n * c.vocab_size);
    linear_forward(t.lnf_out.data(), n, d, w.tensors[slots.head_w], c.vocab_size, w.tensors[slots.head_b],
                   t.logits.data());

    if (w.binary_head) {
        t.pooled = t.mean_hidden(t.penultimate_index());
        t.binary_logits.resize(2);
        linear_forward(t.pooled.data(), 1, d, w.tensors[slots.bin_w], 2, w.tensors[slots.bin_b],
                       t.binary_logits.data());
    }
    return t;
}

template <class Real>
void backward(const WeightView<Real>& w, const BasicForwardTrace<Real>& t, std::span<const Real> dlogits,
              std::span<const Real> dbinary, std::vector<std::vector<Real>>* g,
              std::vector<std::vector<Real>>* lg) {
    const ModelConfig& c = w.config;
    const std::size_t n = t.seq_len;
    const std::size_t d = c.d_model;
    const std::size_t heads = c.n_heads;
    const std::size_t hd = c.head_dim();
    const std::size_t ff = c.d_ff;
    const ParamSlots slots = ParamSlots::for_config(c, w.binary_head);
    const bool lora = !w.lora.empty();
    const std::size_t r = w.lora_rank;
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));

    if (dlogits.size() != n * c.vocab_size) throw InputError("backward: dlogits has the wrong size");
    if (!dbinary.empty() && (!w.binary_head || dbinary.size() != 2))
        throw InputError("backward: binary-head gradient given for a model without a matching head");

    std::vector<Real> dlnf(n * d, Real(0));
    linear_backward(dlogits.data(), t.lnf_out.data(), n, d, w.tensors[slots.head_w], c.vocab_size, dlnf.data(),
                    grad_ptr(g, slots.head_w), grad_ptr(g, slots.head_b));
    std::vector<Real> dx(n * d, Real(0));
    layer_norm_backward(dlnf.data(), t.lnf_xhat, t.lnf_rstd, n, d, w.tensors[slots.lnf_gain], dx.data(),
                        grad_ptr(g, slots.lnf_gain), grad_ptr(g, slots.lnf_bias));

    std::vector<Real> dpooled;
    if (!dbinary.empty()) {
        dpooled.assign(d, Real(0));
        linear_backward(dbinary.data(), t.pooled.data(), 1, d, w.tensors[slots.bin_w], 2, dpooled.data(),
                        grad_ptr(g, slots.bin_w), grad_ptr(g, slots.bin_b));
    }

    for (std::size_t l = c.n_layers; l-- > 0;) {
        const LayerSlots& s = slots.layers[l];
        const auto& a = t.layers[l];
        if (!dpooled.empty() && l == c.n_layers - 2) {
            const Real inv_n = Real(1) / static_cast<Real>(n);
            for (std::size_t i = 0; i < n; ++i) axpy(inv_n, dpooled.data(), dx.data() + i * d, d);
        }

        // x_out = x_mid + W2 gelu(W1 LN2(x_mid) + b1) + b2
        std::vector<Real> dx_mid = dx;
        std::vector<Real> dff_act(n * ff, Real(0));
        linear_backward(dx.data(), a.ff_act.data(), n, ff, w.tensors[s.w2], d, dff_act.data(), grad_ptr(g, s.w2),
                        grad_ptr(g, s.b2));
        for (std::size_t i = 0; i < n * ff; ++i) dff_act[i] *= gelu_grad(a.ff_pre[i]);
        std::vector<Real> dln2(n * d, Real(0));
        linear_backward(dff_act.data(), a.ln2_out.data(), n, d, w.tensors[s.w1], ff, dln2.data(), grad_ptr(g, s.w1),
                        grad_ptr(g, s.b1));
        layer_norm_backward(dln2.data(), a.ln2_xhat, a.ln2_rstd, n, d, w.tensors[s.ln2_gain], dx_mid.data(),
                            grad_ptr(g, s.ln2_gain), grad_ptr(g, s.ln2_bias));

        // x_mid = x_in + Wo attn
        std::vector<Real> dx_in = dx_mid;
        std::vector<Real> dattn(n * d, Real(0));
        linear_backward(dx_mid.data(), a.attn.data(), n, d, w.tensors[s.wo], d, dattn.data(), grad_ptr(g, s.wo),
                        static_cast<Real*>(nullptr));
        const std::size_t lbase = l * kLoraTargetsPerLayer * 2;
        if (lora) {
            lora_backward(dx_mid.data(), a.attn.data(), n, d, w.lora[lbase + 6], w.lora[lbase + 7], r, w.lora_scale,
                          a.lora_o, dattn.data(), grad_ptr(lg, lbase + 6), grad_ptr(lg, lbase + 7));
        }

        std::vector<Real> dq(n * d, Real(0)), dk(n * d, Real(0)), dv(n * d, Real(0));
        std::vector<Real> dp(n);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < n; ++i) {
                const Real* p = a.probs.data() + (h * n + i) * n;
                const Real* dout = dattn.data() + i * d + off;
                Real weighted = 0;
                for (std::size_t j = 0; j <= i; ++j) {
                    dp[j] = dot(dout, a.v.data() + j * d + off, hd);
                    weighted += p[j] * dp[j];
                    axpy(p[j], dout, dv.data() + j * d + off, hd);
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    const Real ds = p[j] * (dp[j] - weighted) * scale;
                    if (ds == Real(0)) continue;
                    axpy(ds, a.k.data() + j * d + off, dq.data() + i * d + off, hd);
                    axpy(ds, a.q.data() + i * d + off, dk.data() + j * d + off, hd);
                }
            }
        }

        std::vector<Real> dln1(n * d, Real(0));
        linear_backward(dq.data(), a.ln1_out.data(), n, d, w.tensors[s.wq], d, dln1.data(), grad_ptr(g, s.wq),
                        static_cast<Real*>(nullptr));
        linear_backward(dk.data(), a.ln1_out.data(), n, d, w.tensors[s.wk], d, dln1.data(), grad_ptr(g, s.wk),
                        static_cast<Real*>(nullptr));
        linear_backward(dv.data(), a.ln1_out.data(), n, d, w.tensors[s.wv], d, dln1.data(), grad_ptr(g, s.wv),
                        static_cast<Real*>(nullptr));
        if (lora) {
            lora_backward(dq.data(), a.ln1_out.data(), n, d, w.lora[lbase + 0], w.lora[lbase + 1], r, w.lora_scale,
                          a.lora_q, dln1.data(), grad_ptr(lg, lbase + 0), grad_ptr(lg, lbase + 1));
            lora_backward(dk.data(), a.ln1_out.data(), n, d, w.lora[lbase + 2], w.lora[lbase + 3], r, w.lora_scale,
                          a.lora_k, dln1.data(), grad_ptr(lg, lbase + 2), grad_ptr(lg, lbase + 3));
            lora_backward(dv.data(), a.ln1_out.data(), n, d, w.lora[lbase + 4], w.lora[lbase + 5], r, w.lora_scale,
                          a.lora_v, dln1.data(), grad_ptr(lg, lbase + 4), grad_ptr(lg, lbase + 5));
        }
        layer_norm_backward(dln1.data(), a.ln1_xhat, a.ln1_rstd, n, d, w.tensors[s.ln1_gain], dx_in.data(),
                            grad_ptr(g, s.ln1_gain), grad_ptr(g, s.ln1_bias));
        dx = std::move(dx_in);
    }

    if (g) {
        Real* dte = (*g)[slots.tok_emb].data();
        Real* dpe = (*g)[slots.pos_emb].data();
        for (std::size_t i = 0; i < n; ++i) {
            axpy(Real(1), dx.data() + i * d, dte + static_cast<std::size_t>(t.tokens[i]) * d, d);
            axpy(Real(1), dx.data() + i * d, dpe + i * d, d);
        }
    }
}

template BasicForwardTrace<float> forward<float>(const WeightView<float>&, std::span<const TokenId>);
template BasicForwardTrace<double> forward<double>(const WeightView<double>&, std::span<const TokenId>);
template void backward<float>(const WeightView<float>&, const BasicForwardTrace<float>&, std::span<const float>,
                              std::span<const float>, std::vector<std::vector<float>>*,
                              std::vector<std::vector<float>>*);
template void backward<double>(const WeightView<double>&, const BasicForwardTrace<double>&, std::span<const double>,
                               std::span<const double>, std::vector<std::vector<double>>*,
                               std::vector<std::vector<double>>*);

}  // namespace detail

template struct BasicForwardTrace<float>;
template struct BasicForwardTrace<double>;

namespace {

void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
    if (tokens.empty()) throw InputError("forward: token sequence is empty");
    if (tokens.size() > c.max_seq_len)
        throw InputError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                         std::to_string(c.max_seq_len));
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] >= c.vocab_size)
            throw InputError("forward: token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                             " is outside the vocabulary of size " + std::to_string(c.vocab_size));
}

}  // namespace

ForwardTrace forward(const ModelState& model, std::span<const TokenId> tokens, const LoraAdapter* adapter) {
    check_tokens(model.config, tokens);
    ForwardTrace t = detail::forward(view_of(model, adapter), tokens);
    for (float v : t.logits)
        if (!std::isfinite(v)) throw NumericError("forward: non-finite logit");
    for (float v : t.binary_logits)
        if (!std::isfinite(v)) throw NumericError("forward: non-finite binary-head logit");
    return t;
}

Gradients backward(const ModelState& model, const ForwardTrace& trace, std::span<const float> dlogits,
                   std::span<const float> dbinary) {
    Gradients g = zero_gradients(model.params);
    detail::backward(view_of(model), trace, dlogits, dbinary, &g, static_cast<Gradients*>(nullptr));
    return g;
}

Gradients backward_lora(const ModelState& model, const LoraAdapter& adapter, const ForwardTrace& trace,
                        std::span<const float> dlogits, std::span<const float> dbinary, Gradients* model_grads) {
    Gradients g = zero_gradients(adapter.params);
    if (model_grads) {
        *model_grads = zero_gradients(model.params);
        detail::backward(view_of(model, &adapter), trace, dlogits, dbinary, model_grads, &g);
    } else {
        detail::backward(view_of(model, &adapter), trace, dlogits, dbinary, static_cast<Gradients*>(nullptr), &g);
    }
    return g;
}

}  // namespace mialab::nn
