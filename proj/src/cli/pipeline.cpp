#include "mialab/cli/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mialab/attack/attack.hpp"
#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"
#include "mialab/corpus/interactions.hpp"
#include "mialab/corpus/sample.hpp"
#include "mialab/corpus/threat_split.hpp"
#include "mialab/corpus/tokenizer.hpp"
#include "mialab/distill/distill.hpp"
#include "mialab/features/features.hpp"
#include "mialab/nn/checkpoint.hpp"
#include "mialab/nn/lora.hpp"
#include "mialab/nn/training.hpp"

namespace mialab::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(Stage s) {
    switch (s) {
        case Stage::gen_data: return "gen-data";
        case Stage::train_target: return "train-target";
        case Stage::distill: return "distill";
        case Stage::extract: return "extract";
        case Stage::attack: return "attack";
        case Stage::evaluate: return "evaluate";
    }
    return "?";
}

Stage stage_from_string(const std::string& name) {
    for (auto s : kStages)
        if (to_string(s) == name) return s;
    throw ConfigError("unknown stage '" + name + "' (valid: gen-data, train-target, distill, extract, attack, evaluate)");
}

std::uint64_t stage_seed(std::uint64_t seed, Stage stage) { return derive_seed(seed, to_string(stage)); }

std::string to_string(Role r) {
    switch (r) {
        case Role::known: return "known";
        case Role::background: return "background";
        case Role::eval_non_member: return "eval-non-member";
        case Role::eval_member: return "eval-member";
        case Role::holdout: return "holdout";
    }
    return "?";
}

namespace {

Role role_from_string(const std::string& s) {
    for (auto r : {Role::known, Role::background, Role::eval_non_member, Role::eval_member, Role::holdout})
        if (to_string(r) == s) return r;
    throw FormatError("unknown role '" + s + "'");
}

std::string hex(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string file_hash(const fs::path& path) { return hex(fnv1a64(read_file(path))); }

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << text;
    out.flush();
    if (!out) throw IoError("failed writing " + path.string());
}

void make_dirs(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

/// Exclusive lock file; one writer per output directory.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) {
        make_dirs(dir);
        path_ = dir / ".mialab.lock";
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f) {
            if (fs::exists(path_))
                throw IoError(dir.string() + " is in use by another run (delete " + path_.string() +
                              " if that run is gone)");
            throw IoError("cannot create " + path_.string());
        }
        std::fclose(f);
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
};

json plain(const ordered_json& j) { return json::parse(j.dump()); }

void say(const RunOptions& o, const std::string& line) {
    if (o.log) *o.log << line << std::endl;
}

// ---------------------------------------------------------------------------
// stage records

struct StageRecord {
    std::string key;
    std::string upstream;
    std::map<std::string, std::string> outputs;
};

std::optional<StageRecord> read_record(const fs::path& dir) {
    const auto path = dir / "stage.json";
    if (!fs::exists(path)) return std::nullopt;
    try {
        const auto j = json::parse(read_file(path));
        StageRecord r;
        r.key = j.at("key").get<std::string>();
        r.upstream = j.at("upstream").get<std::string>();
        r.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
        return r;
    } catch (const json::exception&) {
        return std::nullopt;
    }
}

std::string upstream_hash(const ExperimentConfig& c, Stage s, const RunOptions& o) {
    if (s == Stage::gen_data) return "";
    const auto path = stage_dir(c, static_cast<Stage>(static_cast<int>(s) - 1), o) / "stage.json";
    return fs::exists(path) ? file_hash(path) : "";
}

/// Why a stage's recorded state does not match, empty when it does.
std::string stale_reason(const ExperimentConfig& c, Stage s, const RunOptions& o) {
    const auto dir = stage_dir(c, s, o);
    const auto rec = read_record(dir);
    if (!rec) return "has not been run";
    if (rec->key != stage_key(c, s)) return "was run with a different configuration";
    if (rec->upstream != upstream_hash(c, s, o)) return "is older than its upstream stage";
    for (const auto& [file, hash] : rec->outputs) {
        const auto p = dir / file;
        if (!fs::exists(p)) return "is missing " + file;
        if (file_hash(p) != hash) return "has a modified " + file;
    }
    return "";
}

void write_record(const ExperimentConfig& c, Stage s, const RunOptions& o) {
    const auto dir = stage_dir(c, s, o);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "stage.json") files.push_back(e.path().filename().string());
    std::sort(files.begin(), files.end());
    ordered_json j;
    j["stage"] = to_string(s);
    j["key"] = stage_key(c, s);
    j["upstream"] = upstream_hash(c, s, o);
    ordered_json outputs = ordered_json::object();
    for (const auto& f : files) outputs[f] = file_hash(dir / f);
    j["outputs"] = outputs;
    write_file(dir / "stage.json", j.dump(2) + "\n");
}

void update_manifest(const ExperimentConfig& c, Stage s, const RunOptions& o, double seconds, bool reused) {
    make_dirs(c.output_dir);
    const auto path = fs::path(c.output_dir) / "manifest.json";
    auto cfg = plain(to_json(c));
    cfg.erase("output_dir");
    ordered_json stages = ordered_json::object();
    if (fs::exists(path)) {
        try {
            const auto old = ordered_json::parse(read_file(path));
            if (old.contains("stages")) stages = old.at("stages");
        } catch (const json::exception&) {
        }
    }
    const auto dir = stage_dir(c, s, o);
    ordered_json entry;
    entry["dir"] = dir.string();
    entry["key"] = stage_key(c, s);
    entry["hash"] = file_hash(dir / "stage.json");
    entry["seconds"] = seconds;
    entry["reused"] = reused;
    stages[to_string(s)] = entry;
    ordered_json sorted = ordered_json::object();
    for (auto st : kStages)
        if (stages.contains(to_string(st))) sorted[to_string(st)] = stages[to_string(st)];
    ordered_json m;
    m["config_hash"] = eval::config_hash(cfg);
    m["stages"] = sorted;
    write_file(path, m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// shared artifacts

std::string sample_id(std::size_t index) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "u%05zu", index);
    return buf;
}

struct Corpus {
    std::vector<corpus::Sample> samples;
    std::vector<Role> roles;
    corpus::Tokenizer tokenizer;
    std::vector<nn::TokenSequence> public_seqs;

    nn::TokenSequence encode(std::size_t i) const { return tokenizer.encode_with_eos(corpus::full_text(samples[i])); }

    std::vector<std::size_t> with_role(Role r) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < roles.size(); ++i)
            if (roles[i] == r) out.push_back(i);
        return out;
    }

    std::vector<nn::TokenSequence> encode_all(std::span<const std::size_t> idx) const {
        std::vector<nn::TokenSequence> out;
        out.reserve(idx.size());
        for (auto i : idx) out.push_back(encode(i));
        return out;
    }

    attack::Candidate candidate(std::size_t i) const {
        return {sample_id(i), corpus::full_text(samples[i]), encode(i),
                samples[i].membership == corpus::Membership::member};
    }
};

std::vector<Role> read_roles(const fs::path& path, std::size_t n) {
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    std::vector<Role> roles;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos) throw FormatError(path.string() + ": malformed row");
        roles.push_back(role_from_string(line.substr(comma + 1)));
    }
    if (roles.size() != n) throw FormatError(path.string() + ": role count does not match the samples");
    return roles;
}

Corpus load_corpus(const ExperimentConfig& c, const RunOptions& o, bool with_public) {
    const auto dir = stage_dir(c, Stage::gen_data, o);
    Corpus k;
    k.samples = corpus::read_jsonl(dir / "samples.jsonl");
    k.roles = read_roles(dir / "roles.csv", k.samples.size());
    k.tokenizer = corpus::Tokenizer::load(dir / "tokenizer.json");
    if (with_public)
        for (const auto& s : corpus::read_jsonl(dir / "public.jsonl"))
            k.public_seqs.push_back(k.tokenizer.encode_with_eos(corpus::full_text(s)));
    return k;
}

// Rows kept in feature tables: every sample an attack trains or is scored on.
bool in_feature_table(Role r) { return r != Role::holdout; }

features::FeatureTable extract_table(const nn::ModelState& model, const Corpus& k) {
    features::FeatureTable t;
    for (std::size_t i = 0; i < k.samples.size(); ++i) {
        if (!in_feature_table(k.roles[i])) continue;
        t.sample_ids.push_back(sample_id(i));
        t.membership.push_back(k.samples[i].membership);
        t.records.push_back(features::extract_features(model, k.tokenizer, k.samples[i]));
    }
    return t;
}

/// Feature rows of one table grouped by role.
struct Grouped {
    std::map<Role, std::vector<features::FeatureRecord>> rows;
    std::map<Role, std::vector<std::string>> ids;
    std::map<Role, std::vector<bool>> truth;
};

Grouped group(const features::FeatureTable& t, const Corpus& k) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < k.samples.size(); ++i)
        if (in_feature_table(k.roles[i])) index[sample_id(i)] = i;
    Grouped g;
    for (std::size_t r = 0; r < t.records.size(); ++r) {
        const auto it = index.find(t.sample_ids[r]);
        if (it == index.end()) throw FormatError("feature table row " + t.sample_ids[r] + " is not in the corpus");
        const Role role = k.roles[it->second];
        g.rows[role].push_back(t.records[r]);
        g.ids[role].push_back(t.sample_ids[r]);
        g.truth[role].push_back(t.membership[r] == corpus::Membership::member);
    }
    return g;
}

/// Evaluation rows (eval members and eval non-members) in sample order.
struct EvalSet {
    std::vector<features::FeatureRecord> rows;
    std::vector<std::string> ids;
    std::unique_ptr<bool[]> truth;
    std::size_t n = 0;

    std::span<const bool> truth_span() const { return {truth.get(), n}; }
};

EvalSet eval_set(const features::FeatureTable& t, const Corpus& k) {
    std::map<std::string, Role> role_of;
    for (std::size_t i = 0; i < k.samples.size(); ++i) role_of[sample_id(i)] = k.roles[i];
    EvalSet e;
    std::vector<bool> truth;
    for (std::size_t r = 0; r < t.records.size(); ++r) {
        const Role role = role_of.at(t.sample_ids[r]);
        if (role != Role::eval_member && role != Role::eval_non_member) continue;
        e.rows.push_back(t.records[r]);
        e.ids.push_back(t.sample_ids[r]);
        truth.push_back(t.membership[r] == corpus::Membership::member);
    }
    e.n = truth.size();
    e.truth.reset(new bool[e.n]);
    for (std::size_t i = 0; i < e.n; ++i) e.truth[i] = truth[i];
    return e;
}

attack::Orientation orientation_of(const std::string& attack) {
    if (attack == "ppl" || attack == "zlib") return attack::Orientation::lower_is_member;
    return attack::Orientation::higher_is_member;
}

std::vector<std::string> study_names() {
    std::vector<std::string> names;
    for (auto f : features::kAllFeatures) names.push_back("feature-" + features::to_string(f));
    for (auto f : features::kAllFeatures) names.push_back("without-" + features::to_string(f));
    for (const auto& s : features::strategy_names()) names.push_back("fusion-" + s);
    names.push_back("ours-mlp-classifier");
    return names;
}

bool needs_shadow(const ExperimentConfig& c) {
    return c.eval.separation || std::find(c.attacks.enabled.begin(), c.attacks.enabled.end(), "shadow") !=
                                    c.attacks.enabled.end();
}

bool enabled(const ExperimentConfig& c, const std::string& name) {
    return std::find(c.attacks.enabled.begin(), c.attacks.enabled.end(), name) != c.attacks.enabled.end();
}

// ---------------------------------------------------------------------------
// stages

void gen_data(const ExperimentConfig& c, const fs::path& dir, const RunOptions& o) {
    const auto seed = stage_seed(c.seed, Stage::gen_data);
    auto render = [](const std::vector<corpus::InteractionRecord>& recs) {
        std::vector<corpus::Sample> out;
        out.reserve(recs.size());
        for (const auto& r : recs) {
            auto t = corpus::render_sample(r, corpus::default_template(r));
            out.push_back({std::move(t.text), std::move(t.target_text)});
        }
        return out;
    };
    auto sc = c.corpus.synth;
    sc.seed = derive_seed(seed, "synth");
    auto part = corpus::threat_split(render(corpus::synth_interactions(sc)), [&] {
        auto tc = c.corpus.split;
        tc.seed = derive_seed(seed, "split");
        return tc;
    }());

    std::vector<corpus::Sample> pub;
    if (c.corpus.public_users > 0) {
        auto pc = c.corpus.synth;
        pc.seed = derive_seed(seed, "public");
        pc.n_users = c.corpus.public_users;
        pub = render(corpus::synth_interactions(pc));
        for (auto& s : pub) s.membership = corpus::Membership::non_member;
    }

    std::vector<Role> roles(part.samples.size(), Role::holdout);
    for (auto i : part.attacker_known) roles[i] = Role::known;
    SplitMix64 rng_eval(derive_seed(seed, "eval-split"));
    const auto perm = permutation(part.non_members.size(), rng_eval);
    const std::size_t n_eval =
        std::min(corpus::round_half_up(static_cast<double>(part.non_members.size()) * c.corpus.eval_fraction),
                 part.non_members.size());
    for (std::size_t k = 0; k < perm.size(); ++k)
        roles[part.non_members[perm[k]]] = k < n_eval ? Role::eval_non_member : Role::background;
    SplitMix64 rng_hold(derive_seed(seed, "eval-members"));
    const auto hperm = permutation(part.holdout.size(), rng_hold);
    const std::size_t n_hold = c.corpus.balance_eval ? std::min(n_eval, part.holdout.size()) : part.holdout.size();
    for (std::size_t k = 0; k < n_hold; ++k) roles[part.holdout[hperm[k]]] = Role::eval_member;

    std::vector<std::string> texts;
    for (const auto& s : pub.empty() ? part.samples : pub) texts.push_back(corpus::full_text(s));
    const auto tok = corpus::build_tokenizer(texts, c.corpus.vocab_size);

    corpus::write_jsonl(part.samples, dir / "samples.jsonl");
    corpus::write_jsonl(pub, dir / "public.jsonl");
    tok.save(dir / "tokenizer.json");
    std::string csv = "sample_id,membership,split,role\n";
    for (std::size_t i = 0; i < part.samples.size(); ++i)
        csv += sample_id(i) + "," + corpus::to_string(part.samples[i].membership) + "," +
               corpus::to_string(part.samples[i].split) + "," + to_string(roles[i]) + "\n";
    write_file(dir / "roles.csv", csv);

    std::map<Role, std::size_t> count;
    for (auto r : roles) ++count[r];
    say(o, "  samples " + std::to_string(part.samples.size()) + ", public " + std::to_string(pub.size()) +
               ", vocab " + std::to_string(tok.size()) + "; known " + std::to_string(count[Role::known]) +
               ", background " + std::to_string(count[Role::background]) + ", eval " +
               std::to_string(count[Role::eval_member]) + " members / " +
               std::to_string(count[Role::eval_non_member]) + " non-members");
}

void train_target(const ExperimentConfig& c, const fs::path& dir, const RunOptions& o) {
    const auto seed = stage_seed(c.seed, Stage::train_target);
    const auto k = load_corpus(c, o, true);
    const auto& t = c.target_training;
    auto mc = c.model;
    mc.vocab_size = k.tokenizer.size();
    std::string log = "phase,epoch,loss\n";

    auto base = nn::ModelState::initialize(mc, derive_seed(seed, "init"));
    if (t.pretrain_epochs > 0 && !k.public_seqs.empty()) {
        nn::TrainOptions opt;
        opt.adam.learning_rate = t.pretrain_learning_rate;
        opt.batch_size = t.batch_size;
        opt.seed = derive_seed(seed, "pretrain");
        opt.on_epoch = [&](std::size_t e, double loss) { log += "pretrain," + std::to_string(e) + "," + num(loss) + "\n"; };
        base = nn::train_lm(std::move(base), k.public_seqs, t.pretrain_epochs, opt);
    }

    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < k.samples.size(); ++i)
        if (k.samples[i].membership == corpus::Membership::member) members.push_back(i);
    const auto data = k.encode_all(members);
    nn::TrainOptions opt;
    opt.adam.learning_rate = t.learning_rate;
    opt.batch_size = t.batch_size;
    opt.seed = derive_seed(seed, "finetune");
    opt.on_epoch = [&](std::size_t e, double loss) { log += "finetune," + std::to_string(e) + "," + num(loss) + "\n"; };
    nn::ModelState target;
    if (t.lora_rank > 0) {
        auto adapter = nn::LoraAdapter::create(mc, t.lora_rank, 1.0, derive_seed(seed, "lora"));
        target = nn::train_lm(base, data, t.epochs, opt, &adapter);
    } else {
        target = nn::train_lm(base, data, t.epochs, opt);
    }
    nn::save_checkpoint(base, dir / "base.ckpt");
    nn::save_checkpoint(target, dir / "target.ckpt");
    write_file(dir / "log.csv", log);

    const auto hold = k.encode_all(k.with_role(Role::eval_member));
    const auto non = k.encode_all(k.with_role(Role::eval_non_member));
    char buf[160];
    std::snprintf(buf, sizeof buf, "  target loss: train %.4f, eval members %.4f, eval non-members %.4f",
                  nn::mean_lm_loss(target, data), nn::mean_lm_loss(target, hold), nn::mean_lm_loss(target, non));
    say(o, buf);
}

void run_distill(const ExperimentConfig& c, const fs::path& dir, const RunOptions& o) {
    const auto seed = stage_seed(c.seed, Stage::distill);
    const auto k = load_corpus(c, o, true);
    const auto tdir = stage_dir(c, Stage::train_target, o);
    const auto teacher = nn::load_checkpoint(tdir / "target.ckpt");
    auto student = c.distill.student_init == StudentInit::public_base
                       ? nn::load_checkpoint(tdir / "base.ckpt")
                       : nn::ModelState::initialize(teacher.config, derive_seed(seed, "student-init"));
    if (c.distill.config.hard_label_mode == distill::HardLabelMode::binary_head)
        nn::attach_binary_head(student, derive_seed(seed, "head"));

    auto non = k.public_seqs;
    const auto bg = k.encode_all(k.with_role(Role::background));
    non.insert(non.end(), bg.begin(), bg.end());
    const auto mem = k.encode_all(k.with_role(Role::known));

    auto dc = c.distill.config;
    dc.seed = derive_seed(seed, "distill");
    distill::DistillLog log;
    const auto reference = distill::distill(teacher, student, non, mem, dc, nullptr, &log);

    nn::save_checkpoint(student, dir / "student_init.ckpt");
    nn::save_checkpoint(reference, dir / "reference.ckpt");
    log.write_csv(dir / "log.csv");
    std::string csv = "phase,epoch,batch,alpha,hard,soft,combined\n";
    for (const auto& b : log.batches)
        csv += distill::to_string(b.phase) + "," + std::to_string(b.epoch) + "," + std::to_string(b.batch) + "," +
               num(b.alpha) + "," + num(b.loss.hard) + "," + num(b.loss.soft) + "," + num(b.loss.combined) + "\n";
    write_file(dir / "batches.csv", csv);
    say(o, "  distilled on " + std::to_string(non.size()) + " non-members and " + std::to_string(mem.size()) +
               " known members (" + std::to_string(log.batches.size()) + " updates)");
}

void run_extract(const ExperimentConfig& c, const fs::path& dir, const RunOptions& o) {
    const auto k = load_corpus(c, o, false);
    const auto ddir = stage_dir(c, Stage::distill, o);
    features::write_feature_csv(extract_table(nn::load_checkpoint(ddir / "reference.ckpt"), k),
                                dir / "features_reference.csv");
    features::write_feature_csv(extract_table(nn::load_checkpoint(ddir / "student_init.ckpt"), k),
                                dir / "features_raw.csv");
}

void run_attack(const ExperimentConfig& c, const fs::path& dir, const RunOptions& o) {
    const auto seed = stage_seed(c.seed, Stage::attack);
    const auto k = load_corpus(c, o, false);
    const auto ref_table = features::read_feature_csv(stage_dir(c, Stage::extract, o) / "features_reference.csv");
    const auto g = group(ref_table, k);
    const auto ev = eval_set(ref_table, k);
    const auto& known = g.rows.at(Role::known);
    const auto& background = g.rows.at(Role::background);

    const auto bal = attack::balance_training_set(known.size(), background.size(), derive_seed(seed, "balance"));
    std::vector<features::FeatureRecord> train_mem, train_non;
    for (auto i : bal.members) train_mem.push_back(known[i]);
    for (auto i : bal.non_members) train_non.push_back(background[i]);

    const std::size_t d = known.front().vector.size();
    const auto fusion_seed = derive_seed(seed, "fusion");
    attack::FeatureAttackOptions opts;
    opts.logistic = c.attacks.logistic;
    opts.train_upsamplers = c.features.train_upsamplers;
    opts.mlp.seed = derive_seed(seed, "mlp-classifier");

    auto feature_attack = [&](const std::string& name, const features::FusionConfig& fusion,
                              const attack::FeatureAttackOptions& options) {
        auto fa = attack::train_feature_attack(train_mem, train_non, fusion, options);
        return std::pair{fa, attack::run_feature_attack(name, fa, ev.rows, ev.ids, ev.truth_span())};
    };

    const auto fusion = features::FusionConfig::make(c.features.strategy, c.features.weights, d, fusion_seed);
    const auto [ours_model, ours] = feature_attack("ours", fusion, opts);
    attack::write_scores_csv(ours, dir / "scores_ours.csv");
    json models;
    models["ours"] = ours_model.model;

    // threshold baselines on the target
    const auto target = nn::load_checkpoint(stage_dir(c, Stage::train_target, o) / "target.ckpt");
    std::vector<attack::Candidate> known_c, eval_c;
    for (auto i : k.with_role(Role::known)) known_c.push_back(k.candidate(i));
    for (std::size_t i = 0; i < k.samples.size(); ++i)
        if (k.roles[i] == Role::eval_member || k.roles[i] == Role::eval_non_member) eval_c.push_back(k.candidate(i));
    if (enabled(c, "ppl")) attack::write_scores_csv(attack::ppl_attack(target, known_c, eval_c), dir / "scores_ppl.csv");
    if (enabled(c, "min-k"))
        attack::write_scores_csv(attack::min_k_attack(target, known_c, eval_c, c.attacks.min_k_percent),
                                 dir / "scores_min-k.csv");
    if (enabled(c, "min-k-pp"))
        attack::write_scores_csv(attack::min_k_pp_attack(target, known_c, eval_c, c.attacks.min_k_pp_percent),
                                 dir / "scores_min-k-pp.csv");
    if (enabled(c, "zlib")) attack::write_scores_csv(attack::zlib_attack(target, known_c, eval_c), dir / "scores_zlib.csv");

    if (needs_shadow(c)) {
        std::vector<attack::Candidate> bg_c;
        for (auto i : k.with_role(Role::background)) bg_c.push_back(k.candidate(i));
        const auto base = nn::load_checkpoint(stage_dir(c, Stage::train_target, o) / "base.ckpt");
        const auto sh = attack::shadow_attack(known_c, bg_c, base, c.attacks.shadow, fusion,
                                              derive_seed(seed, "shadow"), opts);
        const auto table = extract_table(sh.shadow, k);
        features::write_feature_csv(table, dir / "features_shadow.csv");
        const auto sev = eval_set(table, k);
        attack::write_scores_csv(attack::run_feature_attack("shadow", sh.attack, sev.rows, sev.ids, sev.truth_span()),
                                 dir / "scores_shadow.csv");
        models["shadow"] = sh.attack.model;
        models["shadow_members"] = sh.shadow_members;
        models["shadow_non_members"] = sh.shadow_non_members;
    }

    if (c.attacks.studies) {
        const auto names = study_names();
        std::size_t next = 0;
        auto study = [&](const features::FusionConfig& f, const attack::FeatureAttackOptions& options) {
            const auto& name = names[next++];
            attack::write_scores_csv(feature_attack(name, f, options).second, dir / ("scores_study_" + name + ".csv"));
        };
        for (std::size_t fi = 0; fi < 4; ++fi) {
            std::array<bool, 4> only = {false, false, false, false};
            only[fi] = true;
            study(features::FusionConfig::make(features::Strategy::concat, c.features.weights, d, fusion_seed, only), opts);
        }
        for (std::size_t fi = 0; fi < 4; ++fi) {
            std::array<bool, 4> without = {true, true, true, true};
            without[fi] = false;
            study(features::FusionConfig::make(c.features.strategy, c.features.weights, d, fusion_seed, without), opts);
        }
        for (const auto& s : features::strategy_names())
            study(features::FusionConfig::make(features::strategy_from_string(s), c.features.weights, d, fusion_seed),
                  opts);
        auto mlp_opts = opts;
        mlp_opts.mlp_classifier = true;
        study(fusion, mlp_opts);
    }
    write_file(dir / "attack_model.json", models.dump(2) + "\n");
}

std::vector<eval::MetricsReport> score_files(const ExperimentConfig& c, const fs::path& adir,
                                             const std::vector<std::string>& names, const std::string& prefix) {
    std::vector<eval::MetricsReport> out;
    for (const auto& n : names) {
        const auto r = attack::read_scores_csv(adir / (prefix + n + ".csv"), n, orientation_of(n));
        out.push_back(eval::compute_metrics(r, c.corpus.name, c.seed));
    }
    return out;
}

void run_evaluate(const ExperimentConfig& c, const fs::path& dir, const RunOptions& o) {
    const auto adir = stage_dir(c, Stage::attack, o);
    const auto metrics = score_files(c, adir, c.attacks.enabled, "scores_");
    std::optional<eval::SeparationReport> sep;
    if (c.eval.separation) {
        const auto k = load_corpus(c, o, false);
        const auto edir = stage_dir(c, Stage::extract, o);
        std::vector<eval::ModelFeatures> models;
        for (const auto& [model, path] : {std::pair{"reference", edir / "features_reference.csv"},
                                          std::pair{"raw", edir / "features_raw.csv"},
                                          std::pair{"shadow", adir / "features_shadow.csv"}}) {
            const auto g = group(features::read_feature_csv(path), k);
            models.push_back({model, g.rows.at(Role::eval_member), g.rows.at(Role::eval_non_member)});
        }
        sep = eval::separation_report(models);
    }
    eval::emit_report(metrics, sep ? &*sep : nullptr, plain(to_json(c)), dir, c.eval.svg);
    if (c.attacks.studies)
        eval::write_metrics_csv(score_files(c, adir, study_names(), "scores_study_"), dir / "studies.csv");
}

void execute(const ExperimentConfig& c, Stage s, const RunOptions& o) {
    const auto dir = stage_dir(c, s, o);
    std::error_code ec;
    fs::remove_all(dir, ec);
    if (ec) throw IoError("cannot clear " + dir.string() + ": " + ec.message());
    make_dirs(dir);
    switch (s) {
        case Stage::gen_data: gen_data(c, dir, o); break;
        case Stage::train_target: train_target(c, dir, o); break;
        case Stage::distill: run_distill(c, dir, o); break;
        case Stage::extract: run_extract(c, dir, o); break;
        case Stage::attack: run_attack(c, dir, o); break;
        case Stage::evaluate: run_evaluate(c, dir, o); break;
    }
    write_record(c, s, o);
}

/// Runs (or reuses) one stage and records it in the run manifest.
void step(const ExperimentConfig& c, Stage s, const RunOptions& o) {
    check_prerequisites(c, s, o);
    if (o.reuse && stale_reason(c, s, o).empty()) {
        say(o, "[" + to_string(s) + "] up to date, reusing " + stage_dir(c, s, o).string());
        update_manifest(c, s, o, 0.0, true);
        return;
    }
    say(o, "[" + to_string(s) + "] running");
    const auto t0 = std::chrono::steady_clock::now();
    execute(c, s, o);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char buf[64];
    std::snprintf(buf, sizeof buf, "[%s] done in %.1f s", to_string(s).c_str(), secs);
    say(o, buf);
    update_manifest(c, s, o, secs, false);
}

[[noreturn]] void rethrow_in_stage(Stage s) {
    const std::string p = "stage " + to_string(s) + ": ";
    try {
        throw;
    } catch (const PrerequisiteError& e) {
        throw PrerequisiteError(p + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(p + e.what());
    } catch (const InputError& e) {
        throw InputError(p + e.what());
    } catch (const NumericError& e) {
        throw NumericError(p + e.what());
    } catch (const FormatError& e) {
        throw FormatError(p + e.what());
    } catch (const IoError& e) {
        throw IoError(p + e.what());
    } catch (const Error& e) {
        throw Error(p + e.what());
    }
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const fs::path& path) {
    std::string csv = "alpha,attack,dataset,seed,acc,recall,f1,auc,tp,fp,tn,fn\n";
    for (const auto& r : rows) {
        const auto& m = r.metrics;
        char a[16];
        std::snprintf(a, sizeof a, "%.1f", r.alpha);
        csv += std::string(a) + "," + m.attack + "," + m.dataset + "," + std::to_string(m.seed) + "," +
               eval::format_number(m.accuracy) + "," + eval::format_number(m.recall) + "," +
               eval::format_number(m.f1) + "," + (m.auc ? eval::format_number(*m.auc) : "NA") + "," +
               std::to_string(m.tp) + "," + std::to_string(m.fp) + "," + std::to_string(m.tn) + "," +
               std::to_string(m.fn) + "\n";
    }
    write_file(path, csv);
}

}  // namespace

fs::path stage_dir(const ExperimentConfig& c, Stage s, const RunOptions& o) {
    const bool shared = (s == Stage::gen_data || s == Stage::train_target) && !o.shared_root.empty();
    return (shared ? o.shared_root : fs::path(c.output_dir)) / to_string(s);
}

std::string stage_key(const ExperimentConfig& c, Stage s) {
    const auto j = plain(to_json(c));
    json k;
    k["stage"] = to_string(s);
    k["seed"] = j["seed"];
    k["corpus"] = j["corpus"];
    k["corpus"].erase("name");
    if (s >= Stage::train_target) {
        k["model"] = j["model"];
        k["target_training"] = j["target_training"];
    }
    if (s >= Stage::distill) k["distill"] = j["distill"];
    if (s >= Stage::attack) {
        k["features"] = j["features"];
        k["attacks"] = j["attacks"];
    }
    if (s >= Stage::evaluate) {
        k["eval"] = j["eval"];
        k["dataset"] = j["corpus"]["name"];
    }
    return eval::config_hash(k);
}

void check_prerequisites(const ExperimentConfig& c, Stage s, const RunOptions& o) {
    for (auto up : kStages) {
        if (up >= s) break;
        const auto why = stale_reason(c, up, o);
        if (!why.empty())
            throw PrerequisiteError("cannot run " + to_string(s) + ": stage " + to_string(up) + " " + why +
                                    "; run " + to_string(up) + " first");
    }
}

bool up_to_date(const ExperimentConfig& c, Stage s, const RunOptions& o) {
    for (auto st : kStages) {
        if (!stale_reason(c, st, o).empty()) return false;
        if (st == s) break;
    }
    return true;
}

void run_stage(const ExperimentConfig& c, Stage s, const RunOptions& o) {
    std::optional<DirLock> lock;
    if (o.lock) lock.emplace(c.output_dir);
    try {
        step(c, s, o);
    } catch (const Error&) {
        rethrow_in_stage(s);
    }
}

RunSummary run_full(const ExperimentConfig& c, const RunOptions& o) {
    std::optional<DirLock> lock;
    if (o.lock) lock.emplace(c.output_dir);
    for (auto s : kStages) {
        try {
            step(c, s, o);
        } catch (const Error&) {
            rethrow_in_stage(s);
        }
    }
    auto summary = read_summary(c, o);
    if (o.log) {
        *o.log << "\nmetrics (" << stage_dir(c, Stage::evaluate, o).string() << "/metrics.csv)\n";
        print_metrics_table(summary.metrics, *o.log);
        if (!summary.studies.empty()) {
            *o.log << "\nstudies (reference features)\n";
            print_metrics_table(summary.studies, *o.log);
        }
    }
    return summary;
}

RunSummary read_summary(const ExperimentConfig& c, const RunOptions& o) {
    const auto dir = stage_dir(c, Stage::evaluate, o);
    RunSummary r;
    r.metrics = eval::read_metrics_csv(dir / "metrics.csv");
    if (fs::exists(dir / "studies.csv")) r.studies = eval::read_metrics_csv(dir / "studies.csv");
    return r;
}

std::vector<SweepRow> run_alpha_sweep(const ExperimentConfig& c, const RunOptions& o) {
    std::optional<DirLock> lock;
    if (o.lock) lock.emplace(c.output_dir);
    RunOptions sub_opts = o;
    sub_opts.shared_root = c.output_dir;
    sub_opts.reuse = true;
    sub_opts.lock = false;
    std::vector<SweepRow> rows;
    for (int i = 0; i <= 10; ++i) {
        auto sub = c;
        sub.distill.config.alpha = i / 10.0;
        char name[16];
        std::snprintf(name, sizeof name, "alpha-%.1f", sub.distill.config.alpha);
        sub.output_dir = (fs::path(c.output_dir) / name).string();
        // only the fused attack depends on alpha
        sub.attacks.enabled = {"ours"};
        sub.attacks.studies = false;
        sub.eval.separation = false;
        sub.eval.svg = false;
        say(o, std::string("== sweep ") + name);
        const auto summary = run_full(sub, sub_opts);
        rows.push_back({sub.distill.config.alpha, summary.metrics.front()});
    }
    write_sweep_csv(rows, fs::path(c.output_dir) / "sweep.csv");
    if (o.log) {
        *o.log << "\nalpha  auc\n";
        for (const auto& r : rows) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.1f    %s", r.alpha, r.metrics.auc ? eval::format_number(*r.metrics.auc).c_str() : "NA");
            *o.log << buf << "\n";
        }
    }
    return rows;
}

void print_metrics_table(std::span<const eval::MetricsReport> rows, std::ostream& out) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-28s %8s %8s %8s %8s\n", "attack", "acc", "recall", "f1", "auc");
    out << buf;
    for (const auto& r : rows) {
        char auc[16] = "NA";
        if (r.auc) std::snprintf(auc, sizeof auc, "%.4f", *r.auc);
        std::snprintf(buf, sizeof buf, "%-28s %8.4f %8.4f %8.4f %8s\n", r.attack.c_str(), r.accuracy, r.recall, r.f1,
                      auc);
        out << buf;
    }
}

}  // namespace mialab::cli
