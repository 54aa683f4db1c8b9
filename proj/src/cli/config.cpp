#include "mialab/cli/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "mialab/common/error.hpp"

namespace mialab::cli {

CorpusSection::CorpusSection() {
    synth.n_users = 1000;
    synth.n_items = 1500;
    synth.item_words = 2;
}

DistillSection::DistillSection() {
    config.alpha = 0.9;
    config.temperature = 2.0;
    config.epochs_nonmember = 5;
    config.epochs_member = 5;
    config.adam.learning_rate = 3e-4;
}

std::vector<std::string> attack_names() { return {"ours", "ppl", "min-k", "min-k-pp", "zlib", "shadow"}; }

std::string to_string(StudentInit s) { return s == StudentInit::public_base ? "public-base" : "scratch"; }

nlohmann::ordered_json to_json(const ExperimentConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    const auto& s = c.corpus.synth;
    j["corpus"] = {{"name", c.corpus.name},
                   {"n_users", s.n_users},
                   {"n_items", s.n_items},
                   {"item_words", s.item_words},
                   {"min_history", s.min_history},
                   {"max_history", s.max_history},
                   {"mode", corpus::to_string(s.mode)},
                   {"n_genres", s.n_genres},
                   {"preferred_genres", s.preferred_genres},
                   {"in_genre_rate", s.in_genre_rate},
                   {"label_noise", s.label_noise},
                   {"public_users", c.corpus.public_users},
                   {"vocab_size", c.corpus.vocab_size},
                   {"member_fraction", c.corpus.split.member_fraction},
                   {"known_fraction", c.corpus.split.known_fraction},
                   {"eval_fraction", c.corpus.eval_fraction},
                   {"balance_eval", c.corpus.balance_eval}};
    j["model"] = {{"d_model", c.model.d_model},
                  {"n_layers", c.model.n_layers},
                  {"n_heads", c.model.n_heads},
                  {"d_ff", c.model.d_ff},
                  {"max_seq_len", c.model.max_seq_len}};
    const auto& t = c.target_training;
    j["target_training"] = {{"pretrain_epochs", t.pretrain_epochs},
                            {"pretrain_learning_rate", t.pretrain_learning_rate},
                            {"epochs", t.epochs},
                            {"learning_rate", t.learning_rate},
                            {"lora_rank", t.lora_rank},
                            {"batch_size", t.batch_size}};
    const auto& d = c.distill.config;
    j["distill"] = {{"alpha", d.alpha},
                    {"temperature", d.temperature},
                    {"epochs_nonmember", d.epochs_nonmember},
                    {"epochs_member", d.epochs_member},
                    {"hard_label_mode", distill::to_string(d.hard_label_mode)},
                    {"learning_rate", d.adam.learning_rate},
                    {"batch_size", d.batch_size},
                    {"lora_rank", d.lora_rank},
                    {"student_init", to_string(c.distill.student_init)}};
    const auto& w = c.features.weights;
    j["features"] = {{"strategy", features::to_string(c.features.strategy)},
                     {"weights",
                      {{"confidence", w.confidence}, {"entropy", w.entropy}, {"loss", w.loss}, {"vector", w.vector}}},
                     {"train_upsamplers", c.features.train_upsamplers}};
    const auto& a = c.attacks;
    j["attacks"] = {{"enabled", a.enabled},
                    {"min_k_percent", a.min_k_percent},
                    {"min_k_pp_percent", a.min_k_pp_percent},
                    {"logistic",
                     {{"learning_rate", a.logistic.learning_rate},
                      {"l2", a.logistic.l2},
                      {"max_iter", a.logistic.max_iter},
                      {"tolerance", a.logistic.tolerance}}},
                    {"shadow",
                     {{"epochs", a.shadow.epochs},
                      {"learning_rate", a.shadow.learning_rate},
                      {"lora_rank", a.shadow.lora_rank},
                      {"batch_size", a.shadow.batch_size}}},
                    {"studies", a.studies}};
    j["eval"] = {{"separation", c.eval.separation}, {"svg", c.eval.svg}};
    return j;
}

namespace {

/// Reads the keys of one JSON object, recording type errors and, on finish,
/// the keys nobody asked for.
class Section {
public:
    Section(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(errors) {
        if (!j_.is_object()) {
            errors_.push_back(path_ + ": expected an object");
            ok_ = false;
        }
    }

    void get(const char* key, std::size_t& out) {
        read(key, [&](const nlohmann::json& v) {
            if (!v.is_number_unsigned()) return fail(key, "a non-negative integer");
            out = v.get<std::size_t>();
        });
    }
    void get(const char* key, std::uint64_t& out, int) {
        read(key, [&](const nlohmann::json& v) {
            if (!v.is_number_unsigned()) return fail(key, "a non-negative integer");
            out = v.get<std::uint64_t>();
        });
    }
    void get(const char* key, double& out) {
        read(key, [&](const nlohmann::json& v) {
            if (!v.is_number()) return fail(key, "a number");
            out = v.get<double>();
        });
    }
    void get(const char* key, bool& out) {
        read(key, [&](const nlohmann::json& v) {
            if (!v.is_boolean()) return fail(key, "true or false");
            out = v.get<bool>();
        });
    }
    void get(const char* key, std::string& out) {
        read(key, [&](const nlohmann::json& v) {
            if (!v.is_string()) return fail(key, "a string");
            out = v.get<std::string>();
        });
    }
    /// String value converted by `parse`, which throws mialab::Error on bad input.
    template <class T, class Parse>
    void get_enum(const char* key, T& out, Parse parse) {
        read(key, [&](const nlohmann::json& v) {
            if (!v.is_string()) return fail(key, "a string");
            try {
                out = parse(v.get<std::string>());
            } catch (const Error& e) {
                errors_.push_back(path_ + "." + key + ": " + e.what());
            }
        });
    }
    template <class Fn>
    void object(const char* key, Fn fn) {
        read(key, [&](const nlohmann::json& v) {
            Section sub(v, path_ + "." + key, errors_);
            if (sub.ok_) {
                fn(sub);
                sub.finish();
            }
        });
    }
    void strings(const char* key, std::vector<std::string>& out) {
        read(key, [&](const nlohmann::json& v) {
            if (!v.is_array()) return fail(key, "an array of strings");
            std::vector<std::string> tmp;
            for (const auto& e : v) {
                if (!e.is_string()) return fail(key, "an array of strings");
                tmp.push_back(e.get<std::string>());
            }
            out = std::move(tmp);
        });
    }

    void finish() {
        if (!ok_) return;
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) errors_.push_back(path_ + ": unknown key '" + k + "'");
    }

    bool ok() const { return ok_; }

private:
    template <class Fn>
    void read(const char* key, Fn fn) {
        seen_.insert(key);
        if (!ok_ || !j_.contains(key)) return;
        fn(j_.at(key));
    }
    void fail(const char* key, const std::string& what) { errors_.push_back(path_ + "." + key + ": expected " + what); }

    const nlohmann::json& j_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> seen_;
    bool ok_ = true;
};

StudentInit student_init_from_string(const std::string& s) {
    if (s == "public-base") return StudentInit::public_base;
    if (s == "scratch") return StudentInit::scratch;
    throw ConfigError("unknown student_init '" + s + "' (expected public-base or scratch)");
}

}  // namespace

ParseResult parse_config(const nlohmann::json& doc) {
    ParseResult r;
    auto& c = r.config;
    Section root(doc, "config", r.errors);
    if (!root.ok()) return r;
    root.get("seed", c.seed, 0);
    root.get("output_dir", c.output_dir);
    root.object("corpus", [&](Section& s) {
        s.get("name", c.corpus.name);
        s.get("n_users", c.corpus.synth.n_users);
        s.get("n_items", c.corpus.synth.n_items);
        s.get("item_words", c.corpus.synth.item_words);
        s.get("min_history", c.corpus.synth.min_history);
        s.get("max_history", c.corpus.synth.max_history);
        s.get_enum("mode", c.corpus.synth.mode, corpus::preference_mode_from_string);
        s.get("n_genres", c.corpus.synth.n_genres);
        s.get("preferred_genres", c.corpus.synth.preferred_genres);
        s.get("in_genre_rate", c.corpus.synth.in_genre_rate);
        s.get("label_noise", c.corpus.synth.label_noise);
        s.get("public_users", c.corpus.public_users);
        s.get("vocab_size", c.corpus.vocab_size);
        s.get("member_fraction", c.corpus.split.member_fraction);
        s.get("known_fraction", c.corpus.split.known_fraction);
        s.get("eval_fraction", c.corpus.eval_fraction);
        s.get("balance_eval", c.corpus.balance_eval);
    });
    root.object("model", [&](Section& s) {
        s.get("d_model", c.model.d_model);
        s.get("n_layers", c.model.n_layers);
        s.get("n_heads", c.model.n_heads);
        s.get("d_ff", c.model.d_ff);
        s.get("max_seq_len", c.model.max_seq_len);
    });
    root.object("target_training", [&](Section& s) {
        auto& t = c.target_training;
        s.get("pretrain_epochs", t.pretrain_epochs);
        s.get("pretrain_learning_rate", t.pretrain_learning_rate);
        s.get("epochs", t.epochs);
        s.get("learning_rate", t.learning_rate);
        s.get("lora_rank", t.lora_rank);
        s.get("batch_size", t.batch_size);
    });
    root.object("distill", [&](Section& s) {
        auto& d = c.distill.config;
        s.get("alpha", d.alpha);
        s.get("temperature", d.temperature);
        s.get("epochs_nonmember", d.epochs_nonmember);
        s.get("epochs_member", d.epochs_member);
        s.get_enum("hard_label_mode", d.hard_label_mode, distill::hard_label_mode_from_string);
        s.get("learning_rate", d.adam.learning_rate);
        s.get("batch_size", d.batch_size);
        s.get("lora_rank", d.lora_rank);
        s.get_enum("student_init", c.distill.student_init, student_init_from_string);
    });
    root.object("features", [&](Section& s) {
        s.get_enum("strategy", c.features.strategy, features::strategy_from_string);
        s.object("weights", [&](Section& w) {
            w.get("confidence", c.features.weights.confidence);
            w.get("entropy", c.features.weights.entropy);
            w.get("loss", c.features.weights.loss);
            w.get("vector", c.features.weights.vector);
        });
        s.get("train_upsamplers", c.features.train_upsamplers);
    });
    root.object("attacks", [&](Section& s) {
        auto& a = c.attacks;
        s.strings("enabled", a.enabled);
        s.get("min_k_percent", a.min_k_percent);
        s.get("min_k_pp_percent", a.min_k_pp_percent);
        s.object("logistic", [&](Section& l) {
            l.get("learning_rate", a.logistic.learning_rate);
            l.get("l2", a.logistic.l2);
            l.get("max_iter", a.logistic.max_iter);
            l.get("tolerance", a.logistic.tolerance);
        });
        s.object("shadow", [&](Section& sh) {
            sh.get("epochs", a.shadow.epochs);
            sh.get("learning_rate", a.shadow.learning_rate);
            sh.get("lora_rank", a.shadow.lora_rank);
            sh.get("batch_size", a.shadow.batch_size);
        });
        s.get("studies", a.studies);
    });
    root.object("eval", [&](Section& s) {
        s.get("separation", c.eval.separation);
        s.get("svg", c.eval.svg);
    });
    root.finish();
    const auto more = validate(c);
    r.errors.insert(r.errors.end(), more.begin(), more.end());
    return r;
}

std::vector<std::string> validate(const ExperimentConfig& c) {
    std::vector<std::string> e;
    auto add_all = [&](const std::string& prefix, const std::vector<std::string>& problems) {
        for (const auto& p : problems) e.push_back(prefix + p);
    };
    if (c.output_dir.empty()) e.push_back("output_dir: must not be empty");
    if (c.corpus.name.empty() || c.corpus.name.find_first_of(",\n\"") != std::string::npos)
        e.push_back("corpus.name: must be a non-empty label without commas or quotes");
    add_all("corpus: ", c.corpus.synth.problems());
    add_all("corpus: ", c.corpus.split.problems());
    if (c.corpus.vocab_size < 8) e.push_back("corpus.vocab_size: must be >= 8");
    if (!(c.corpus.eval_fraction > 0.0 && c.corpus.eval_fraction < 1.0))
        e.push_back("corpus.eval_fraction: must be in (0, 1)");

    try {
        auto m = c.model;
        m.vocab_size = c.corpus.vocab_size;
        m.validate();
        if (m.d_model < 2) e.push_back("model.d_model: must be >= 2");
    } catch (const Error& ex) {
        e.push_back(ex.what());
    }

    const auto& t = c.target_training;
    if (!(t.pretrain_learning_rate > 0.0)) e.push_back("target_training.pretrain_learning_rate: must be > 0");
    if (!(t.learning_rate > 0.0)) e.push_back("target_training.learning_rate: must be > 0");
    if (t.batch_size < 1) e.push_back("target_training.batch_size: must be >= 1");
    if (t.epochs < 1) e.push_back("target_training.epochs: must be >= 1");

    add_all("distill: ", c.distill.config.problems());

    for (auto f : features::kAllFeatures) {
        const double w = c.features.weights[f];
        if (!(w >= 0.0) || !std::isfinite(w))
            e.push_back("features.weights." + features::to_string(f) + ": must be a finite value >= 0");
    }

    const auto& a = c.attacks;
    const auto names = attack_names();
    if (a.enabled.empty()) e.push_back("attacks.enabled: at least one attack is required");
    std::set<std::string> seen;
    for (const auto& n : a.enabled) {
        if (std::find(names.begin(), names.end(), n) == names.end())
            e.push_back("attacks.enabled: unknown attack '" + n + "' (valid: ours, ppl, min-k, min-k-pp, zlib, shadow)");
        if (!seen.insert(n).second) e.push_back("attacks.enabled: '" + n + "' listed twice");
    }
    for (const auto& [name, k] : {std::pair{"min_k_percent", a.min_k_percent}, {"min_k_pp_percent", a.min_k_pp_percent}})
        if (!(k > 0.0 && k <= 100.0)) e.push_back(std::string("attacks.") + name + ": must be in (0, 100]");
    if (!(a.logistic.learning_rate > 0.0)) e.push_back("attacks.logistic.learning_rate: must be > 0");
    if (a.logistic.max_iter < 1) e.push_back("attacks.logistic.max_iter: must be >= 1");
    if (!(a.logistic.l2 >= 0.0)) e.push_back("attacks.logistic.l2: must be >= 0");
    if (!(a.shadow.learning_rate > 0.0)) e.push_back("attacks.shadow.learning_rate: must be > 0");
    if (a.shadow.batch_size < 1) e.push_back("attacks.shadow.batch_size: must be >= 1");

    // population sizes implied by the threat split
    if (c.corpus.split.problems().empty() && c.corpus.synth.n_users > 0) {
        const std::size_t n = c.corpus.synth.n_users;
        const std::size_t non = corpus::round_half_up(static_cast<double>(n) * (1.0 - c.corpus.split.member_fraction));
        const std::size_t members = n - std::min(non, n);
        const std::size_t known = corpus::round_half_up(static_cast<double>(members) * c.corpus.split.known_fraction);
        const std::size_t eval_non = corpus::round_half_up(static_cast<double>(non) * c.corpus.eval_fraction);
        const std::size_t background = non - std::min(eval_non, non);
        if (known < 2)
            e.push_back("corpus: the attacker would know " + std::to_string(known) +
                        " members; attack training needs at least 2 (raise n_users or known_fraction)");
        if (background < known)
            e.push_back("corpus: " + std::to_string(background) + " background non-members cannot balance " +
                        std::to_string(known) + " known members (lower eval_fraction or known_fraction)");
        if (eval_non < 1 || members - known < 1) e.push_back("corpus: the evaluation set would be empty");
    }
    return e;
}

std::vector<std::string> validate_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return {"cannot read " + path.string()};
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        return {path.string() + ": invalid JSON: " + e.what()};
    }
    return parse_config(doc).errors;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": invalid JSON: " + e.what());
    }
    auto r = parse_config(doc);
    if (!r.errors.empty()) {
        std::string msg = path.string() + ": " + std::to_string(r.errors.size()) + " problem(s)";
        for (const auto& e : r.errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    return r.config;
}

std::vector<std::string> preset_names() { return {"lf-like", "ml-like", "bc-like", "dl-like"}; }

void apply_preset(ExperimentConfig& c, const std::string& preset) {
    // known members : attacker non-member pool, with 800 members and 200
    // attacker non-members at the default size
    struct Preset {
        const char* name;
        corpus::PreferenceMode mode;
        double known_fraction;
        double alpha;
    };
    static const Preset presets[] = {
        {"lf-like", corpus::PreferenceMode::history_only, 200.0 / 11.0 / 800.0, 0.9},  // 1 : 11
        {"ml-like", corpus::PreferenceMode::with_labels, 0.05, 0.9},                   // 1 : 5
        {"bc-like", corpus::PreferenceMode::with_labels, 200.0 / 4.4 / 800.0, 1.0},    // 1 : 4.4
        {"dl-like", corpus::PreferenceMode::history_only, 200.0 / 15.0 / 800.0, 1.0},  // 1 : 15
    };
    for (const auto& p : presets) {
        if (preset != p.name) continue;
        c.corpus.name = p.name;
        c.corpus.synth.mode = p.mode;
        c.corpus.split.known_fraction = p.known_fraction;
        c.distill.config.alpha = p.alpha;
        return;
    }
    throw ConfigError("unknown preset '" + preset + "' (valid: lf-like, ml-like, bc-like, dl-like)");
}

}  // namespace mialab::cli
