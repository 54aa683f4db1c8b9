#include "mialab/nn/model.hpp"

#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"

namespace mialab::nn {

void ModelConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
    if (n_layers < 2) throw ConfigError("model: n_layers must be >= 2 so a penultimate layer exists");
    if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0)
        throw ConfigError("model: d_model must be a positive multiple of n_heads");
    if (d_ff == 0) throw ConfigError("model: d_ff must be positive");
    if (max_seq_len < 2) throw ConfigError("model: max_seq_len must be >= 2");
}

ModelConfig ModelConfig::wide_preset() {
    ModelConfig c;
    c.d_model = 512;
    c.n_heads = 8;
    c.d_ff = 1024;
    return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},       {"d_ff", c.d_ff},           {"max_seq_len", c.max_seq_len}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
}

Gradients zero_gradients(const ParameterSet& params) {
    Gradients g;
    g.reserve(params.size());
    for (const auto& p : params) g.emplace_back(p.size(), 0.0f);
    return g;
}

std::vector<std::pair<std::string, std::vector<std::size_t>>> parameter_layout(const ModelConfig& c,
                                                                              bool binary_head) {
    const std::size_t d = c.d_model;
    std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
    out.push_back({"tok_emb", {c.vocab_size, d}});
    out.push_back({"pos_emb", {c.max_seq_len, d}});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        out.push_back({p + "ln1.gain", {d}});
        out.push_back({p + "ln1.bias", {d}});
        out.push_back({p + "attn.wq", {d, d}});
        out.push_back({p + "attn.wk", {d, d}});
        out.push_back({p + "attn.wv", {d, d}});
        out.push_back({p + "attn.wo", {d, d}});
        out.push_back({p + "ln2.gain", {d}});
        out.push_back({p + "ln2.bias", {d}});
        out.push_back({p + "ffn.w1", {c.d_ff, d}});
        out.push_back({p + "ffn.b1", {c.d_ff}});
        out.push_back({p + "ffn.w2", {d, c.d_ff}});
        out.push_back({p + "ffn.b2", {d}});
    }
    out.push_back({"ln_f.gain", {d}});
    out.push_back({"ln_f.bias", {d}});
    out.push_back({"lm_head.weight", {c.vocab_size, d}});
    out.push_back({"lm_head.bias", {c.vocab_size}});
    if (binary_head) {
        out.push_back({"binary_head.weight", {2, d}});
        out.push_back({"binary_head.bias", {2}});
    }
    return out;
}

ParamSlots ParamSlots::for_config(const ModelConfig& config, bool binary_head) {
    ParamSlots s;
    std::size_t next = 2;
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerSlots ls{};
        ls.ln1_gain = next++;
        ls.ln1_bias = next++;
        ls.wq = next++;
        ls.wk = next++;
        ls.wv = next++;
        ls.wo = next++;
        ls.ln2_gain = next++;
        ls.ln2_bias = next++;
        ls.w1 = next++;
        ls.b1 = next++;
        ls.w2 = next++;
        ls.b2 = next++;
        s.layers.push_back(ls);
    }
    s.lnf_gain = next++;
    s.lnf_bias = next++;
    s.head_w = next++;
    s.head_b = next++;
    s.binary_head = binary_head;
    if (binary_head) {
        s.bin_w = next++;
        s.bin_b = next++;
    }
    return s;
}

namespace {

void fill_normal(std::vector<float>& v, double stddev, SplitMix64& rng) {
    for (auto& x : v) x = static_cast<float>(rng.normal() * stddev);
}

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

Parameter init_parameter(const std::string& name, const std::vector<std::size_t>& shape, const ModelConfig& c,
                         SplitMix64& rng) {
    Parameter p{name, shape, {}};
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    p.values.assign(n, 0.0f);
    const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(c.n_layers));
    if (name == "tok_emb" || name == "pos_emb") {
        fill_normal(p.values, 1.0, rng);
    } else if (ends_with(name, ".gain")) {
        std::fill(p.values.begin(), p.values.end(), 1.0f);
    } else if (shape.size() == 2) {
        double stddev = 1.0 / std::sqrt(static_cast<double>(shape[1]));
        if (ends_with(name, "attn.wo") || ends_with(name, "ffn.w2")) stddev *= residual_scale;
        fill_normal(p.values, stddev, rng);
    }
    return p;
}

}  // namespace

ModelState ModelState::initialize(const ModelConfig& config, std::uint64_t seed, bool binary_head) {
    config.validate();
    ModelState m;
    m.config = config;
    SplitMix64 rng(seed);
    for (const auto& [name, shape] : parameter_layout(config, binary_head))
        m.params.push_back(init_parameter(name, shape, config, rng));
    return m;
}

bool ModelState::has_binary_head() const {
    return !params.empty() && params.back().name == "binary_head.bias";
}

const Parameter& ModelState::param(std::string_view name) const {
    for (const auto& p : params)
        if (p.name == name) return p;
    throw InputError("model has no parameter named '" + std::string(name) + "'");
}

Parameter& ModelState::param(std::string_view name) {
    return const_cast<Parameter&>(std::as_const(*this).param(name));
}

std::size_t ModelState::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
}

void ModelState::validate() const {
    config.validate();
    const auto layout = parameter_layout(config, has_binary_head());
    if (layout.size() != params.size())
        throw FormatError("model has " + std::to_string(params.size()) + " tensors, config implies " +
                          std::to_string(layout.size()));
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& p = params[i];
        if (p.name != layout[i].first)
            throw FormatError("tensor " + std::to_string(i) + " is '" + p.name + "', expected '" +
                              layout[i].first + "'");
        if (p.shape != layout[i].second) throw FormatError("tensor '" + p.name + "' has the wrong shape");
        std::size_t n = 1;
        for (auto s : p.shape) n *= s;
        if (n != p.values.size()) throw FormatError("tensor '" + p.name + "' payload does not match its shape");
        for (float v : p.values)
            if (!std::isfinite(v)) throw FormatError("tensor '" + p.name + "' contains a non-finite value");
    }
}

bool operator==(const Parameter& a, const Parameter& b) {
    return a.name == b.name && a.shape == b.shape && a.values.size() == b.values.size() &&
           (a.values.empty() ||
            std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0);
}

bool ModelState::operator==(const ModelState& other) const {
    return config == other.config && params == other.params;
}

void attach_binary_head(ModelState& model, std::uint64_t seed) {
    if (model.has_binary_head()) return;
    SplitMix64 rng(seed);
    const std::size_t d = model.config.d_model;
    Parameter w{"binary_head.weight", {2, d}, std::vector<float>(2 * d)};
    fill_normal(w.values, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    model.params.push_back(std::move(w));
    model.params.push_back(Parameter{"binary_head.bias", {2}, {0.0f, 0.0f}});
}

ModelState without_binary_head(const ModelState& model) {
    ModelState copy = model;
    if (copy.has_binary_head()) copy.params.resize(copy.params.size() - 2);
    return copy;
}

}  // namespace mialab::nn
