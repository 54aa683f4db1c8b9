#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "doctest.h"
#include "mialab/attack/attack.hpp"
#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"
#include "mialab/nn/ops.hpp"
#include "mialab/nn/transformer.hpp"

using namespace mialab;
using namespace mialab::attack;
using features::FeatureRecord;
using features::FusionConfig;
using features::Strategy;
using nn::ModelConfig;
using nn::ModelState;
using nn::TokenId;

namespace {

ModelConfig small_config(std::size_t vocab = 20) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 16;
    return c;
}

Matrix matrix(std::size_t cols, std::vector<double> values) {
    Matrix m;
    m.cols = cols;
    m.rows = values.size() / cols;
    m.values = std::move(values);
    return m;
}

std::vector<Candidate> random_candidates(std::size_t n, const std::string& prefix, bool member, std::uint64_t seed,
                                         std::size_t vocab = 20) {
    SplitMix64 rng(seed);
    std::vector<Candidate> out;
    for (std::size_t i = 0; i < n; ++i) {
        Candidate c;
        c.sample_id = prefix + std::to_string(i);
        c.member = member;
        const std::size_t len = 4 + rng.below(8);
        for (std::size_t k = 0; k < len; ++k) {
            const auto t = static_cast<TokenId>(3 + rng.below(vocab - 3));
            c.tokens.push_back(t);
            c.text += "w" + std::to_string(t) + " ";
        }
        out.push_back(std::move(c));
    }
    return out;
}

// Fraction of (member, non-member) pairs ranked correctly, ties counted half.
double pairwise_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
    double wins = 0.0;
    for (double p : pos)
        for (double q : neg) wins += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
    return wins / static_cast<double>(pos.size() * neg.size());
}

}  // namespace

TEST_CASE("balanced set: 40 members against 200 non-members") {
    const auto b = balance_training_set(40, 200, 7);
    CHECK(b.members.size() == 40);
    CHECK(b.non_members.size() == 40);
    const std::set<std::size_t> uniq(b.non_members.begin(), b.non_members.end());
    CHECK(uniq.size() == 40);
    for (auto i : b.non_members) CHECK(i < 200);
    const auto again = balance_training_set(40, 200, 7);
    CHECK(again.non_members == b.non_members);
    CHECK(balance_training_set(40, 200, 8).non_members != b.non_members);
    CHECK_THROWS_AS(balance_training_set(40, 39, 7), InputError);
    CHECK_THROWS_AS(balance_training_set(0, 39, 7), InputError);
}

TEST_CASE("balanced sets always have equal class counts") {
    SplitMix64 rng(1);
    for (int t = 0; t < 50; ++t) {
        const std::size_t m = 1 + rng.below(60), n = m + rng.below(200);
        const auto b = balance_training_set(m, n, t);
        CHECK(b.members.size() == b.non_members.size());
    }
}

TEST_CASE("logistic regression separates a 1-D sign rule") {
    const auto x = matrix(1, {1, 1, 1, 1, -1, -1, -1, -1});
    const std::vector<int> y = {1, 1, 1, 1, 0, 0, 0, 0};
    const auto m = train_logistic(x, y);
    CHECK(m.iterations <= 1000);
    const auto inf = attack_infer(m, x);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(inf.member[i] == (y[i] == 1));
    CHECK(m.weights[0] > 0.0);
}

TEST_CASE("logistic regression reaches full accuracy on separable 2-D data") {
    SplitMix64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const double a = rng.normal(), b = rng.normal();
        std::vector<double> vals;
        std::vector<int> y;
        while (y.size() < 60) {
            const double p = rng.uniform(-3, 3), q = rng.uniform(-3, 3);
            const double margin = (a * p + b * q) / std::hypot(a, b);
            if (std::abs(margin) < 0.5) continue;
            vals.insert(vals.end(), {p, q});
            y.push_back(margin > 0 ? 1 : 0);
        }
        if (std::count(y.begin(), y.end(), 1) < 2 || std::count(y.begin(), y.end(), 0) < 2) continue;
        const auto x = matrix(2, vals);
        const auto m = train_logistic(x, y, {.learning_rate = 0.1, .l2 = 1e-3, .max_iter = 1000});
        const auto inf = attack_infer(m, x);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < y.size(); ++i) correct += inf.member[i] == (y[i] == 1);
        CHECK(correct == y.size());
    }
}

TEST_CASE("duplicating every row leaves the decision boundary unchanged") {
    SplitMix64 rng(9);
    std::vector<double> vals;
    std::vector<int> y;
    for (int i = 0; i < 30; ++i) {
        const int label = i % 2;
        vals.insert(vals.end(), {rng.normal() + label, rng.normal() - label, rng.normal()});
        y.push_back(label);
    }
    const auto x = matrix(3, vals);
    auto vals2 = vals;
    vals2.insert(vals2.end(), vals.begin(), vals.end());
    auto y2 = y;
    y2.insert(y2.end(), y.begin(), y.end());
    const auto a = train_logistic(x, y);
    const auto b = train_logistic(matrix(3, vals2), y2);
    double na = 0, nb = 0;
    for (std::size_t k = 0; k < 3; ++k) {
        na += a.weights[k] * a.weights[k];
        nb += b.weights[k] * b.weights[k];
    }
    for (std::size_t k = 0; k < 3; ++k)
        CHECK(std::abs(a.weights[k] / std::sqrt(na) - b.weights[k] / std::sqrt(nb)) < 1e-4);
    CHECK(a.bias == doctest::Approx(b.bias).epsilon(1e-6));
}

TEST_CASE("logistic training contract errors") {
    const auto x = matrix(1, {1, 2, 3, 4});
    CHECK_THROWS_AS(train_logistic(x, std::vector<int>{1, 1, 1, 1}), InputError);
    CHECK_THROWS_AS(train_logistic(x, std::vector<int>{1, 0, 0, 0}), InputError);
    CHECK_THROWS_AS(train_logistic(x, std::vector<int>{1, 1, 0}), InputError);
    CHECK_THROWS_AS(train_logistic(x, std::vector<int>{1, 1, 0, 0}, {.max_iter = 0}), InputError);
    const auto bad = matrix(1, {1, NAN, 3, 4});
    CHECK_THROWS_AS(train_logistic(bad, std::vector<int>{1, 1, 0, 0}), InputError);
}

TEST_CASE("attack_infer: zero model, saturation, hand-evaluated logistic") {
    AttackModel zero;
    zero.weights = {0.0, 0.0};
    const auto x = matrix(2, {1.0, 2.0, -3.0, 0.5, 10.0, -10.0});
    for (double p : attack_infer(zero, x).probability) CHECK(p == 0.5);
    for (bool m : attack_infer(zero, x).member) CHECK(m);

    AttackModel m;
    m.weights = {0.7, -1.3};
    m.bias = 0.2;
    const auto p = attack_infer(m, x).probability;
    for (std::size_t i = 0; i < 3; ++i) {
        const double z = 0.7 * x.values[2 * i] - 1.3 * x.values[2 * i + 1] + 0.2;
        CHECK(p[i] == doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-12));
    }
    CHECK(attack_infer(m, matrix(2, {70.0, -130.0})).probability[0] > 0.99);
    CHECK_THROWS_AS(attack_infer(m, matrix(3, {1, 2, 3})), InputError);
}

TEST_CASE("attack model metadata serializes") {
    const auto x = matrix(1, {1, 1, -1, -1});
    auto m = train_logistic(x, std::vector<int>{1, 1, 0, 0});
    m.strategy = "weighted-mlp";
    m.seed = 42;
    nlohmann::json j = m;
    CHECK(j["strategy"] == "weighted-mlp");
    CHECK(j["seed"] == 42);
    CHECK(j["iterations"].get<std::size_t>() == m.iterations);
    CHECK(j["weights"].size() == 1);
}

TEST_CASE("lowest-k selection follows the floor rule") {
    CHECK(lowest_k_mean({-1, -2, -3}, 34) == -3.0);
    CHECK(lowest_k_mean({-1, -2, -3}, 100) == -2.0);
    CHECK(lowest_k_mean({-4.5}, 1) == -4.5);
    CHECK(min_k_count(10, 20) == 2);
    CHECK(min_k_count(3, 34) == 1);
    CHECK(min_k_count(3, 67) == 2);
    CHECK(min_k_count(7, 1) == 1);
    CHECK_THROWS_AS(min_k_count(5, 0), InputError);
    CHECK_THROWS_AS(min_k_count(5, 101), InputError);
    CHECK_THROWS_AS(min_k_count(0, 20), InputError);
}

TEST_CASE("min-k at 100 percent is the negative LM loss") {
    SplitMix64 rng(2);
    for (int t = 0; t < 15; ++t) {
        const auto m = ModelState::initialize(small_config(), 50 + t);
        std::vector<TokenId> seq(2 + rng.below(12));
        for (auto& tok : seq) tok = static_cast<TokenId>(rng.below(20));
        const auto pair = nn::next_token_pair(seq);
        const double loss = nn::lm_loss(nn::forward(m, pair.inputs), pair.targets);
        CHECK(std::abs(min_k_score(m, seq, 100) + loss) < 1e-6);
    }
    const auto m = ModelState::initialize(small_config(), 3);
    const std::vector<TokenId> two = {4, 9};
    const auto pair = nn::next_token_pair(two);
    const auto lp = nn::log_softmax(nn::forward(m, pair.inputs).logits_row(0));
    CHECK(min_k_score(m, two, 5) == doctest::Approx(lp[9]).epsilon(1e-12));
    CHECK_THROWS_AS(min_k_score(m, std::vector<TokenId>{4}, 20), InputError);
}

TEST_CASE("min-k++ matches brute-force moments over the vocabulary") {
    const auto m = ModelState::initialize(small_config(), 8);
    const std::vector<TokenId> seq = {1, 7, 12, 5};
    const auto pair = nn::next_token_pair(seq);
    const auto trace = nn::forward(m, pair.inputs);
    std::vector<double> z;
    for (std::size_t pos = 0; pos < 3; ++pos) {
        const auto row = trace.logits_row(pos);
        double mx = -1e300;
        for (float v : row) mx = std::max(mx, static_cast<double>(v));
        double sum = 0.0;
        for (float v : row) sum += std::exp(v - mx);
        std::vector<double> logp;
        for (float v : row) logp.push_back(v - mx - std::log(sum));
        double mu = 0.0;
        for (double l : logp) mu += std::exp(l) * l;
        double var = 0.0;
        for (double l : logp) var += std::exp(l) * (l - mu) * (l - mu);
        z.push_back((logp[pair.targets[pos]] - mu) / std::sqrt(var));
    }
    CHECK(min_k_pp_score(m, seq, 100) == doctest::Approx((z[0] + z[1] + z[2]) / 3).epsilon(1e-9));
    CHECK(min_k_pp_score(m, seq, 34) == doctest::Approx(*std::min_element(z.begin(), z.end())).epsilon(1e-9));
    const std::vector<TokenId> two = {1, 7, 12};
    CHECK(min_k_pp_score(m, two, 100) == doctest::Approx((z[0] + z[1]) / 2).epsilon(1e-9));
}

TEST_CASE("min-k++ is zero under a uniform predictive distribution") {
    auto m = ModelState::initialize(small_config(), 8);
    const auto s = m.slots();
    std::fill(m.params[s.head_w].values.begin(), m.params[s.head_w].values.end(), 0.0f);
    std::fill(m.params[s.head_b].values.begin(), m.params[s.head_b].values.end(), 0.0f);
    CHECK(min_k_pp_score(m, std::vector<TokenId>{1, 5, 9}, 50) == 0.0);
}

TEST_CASE("zlib length and score") {
    std::string repeated;
    for (int i = 0; i < 200; ++i) repeated += "apple ";
    CHECK(zlib_length(repeated) < repeated.size() / 10);
    // independent compressor call for the same bytes
    uLongf cap = compressBound(repeated.size());
    std::vector<Bytef> buf(cap);
    compress2(buf.data(), &cap, reinterpret_cast<const Bytef*>(repeated.data()), repeated.size(), 6);
    CHECK(zlib_length(repeated) == cap);

    const auto m = ModelState::initialize(small_config(), 4);
    Candidate a{"a", "w4 w9", {4, 9}, true};
    Candidate b = a;
    b.sample_id = "b";
    CHECK(zlib_score(m, a) == zlib_score(m, b));
    const auto pair = nn::next_token_pair(a.tokens);
    const double nll = -nn::log_softmax(nn::forward(m, pair.inputs).logits_row(0))[9];
    CHECK(zlib_score(m, a) == doctest::Approx(nll / static_cast<double>(zlib_length("w4 w9"))).epsilon(1e-9));
    Candidate empty{"e", "", {4, 9}, false};
    CHECK_THROWS_AS(zlib_score(m, empty), InputError);
}

TEST_CASE("PPL threshold attack on a five-sample fixture") {
    const auto m = ModelState::initialize(small_config(), 13);
    auto known = random_candidates(3, "k", true, 21);
    auto cands = random_candidates(5, "c", false, 22);
    std::vector<double> ppl;
    for (const auto& k : known) {
        const auto pair = nn::next_token_pair(k.tokens);
        ppl.push_back(std::exp(nn::lm_loss(nn::forward(m, pair.inputs), pair.targets)));
    }
    const auto r = ppl_attack(m, known, cands);
    CHECK(r.threshold == doctest::Approx((ppl[0] + ppl[1] + ppl[2]) / 3).epsilon(1e-12));
    REQUIRE(r.scored.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(r.scored[i].sample_id == cands[i].sample_id);
        CHECK(r.scored[i].score == doctest::Approx(perplexity(m, cands[i].tokens)));
        CHECK(r.scored[i].predicted == (r.scored[i].score < r.threshold));
    }
    // a copy of a known member scores identically to it
    std::vector<Candidate> copies(3, known[0]);
    const auto rc = ppl_attack(m, known, copies);
    CHECK(rc.scored[0].score == rc.scored[1].score);
    CHECK(rc.scored[1].score == rc.scored[2].score);
    CHECK_THROWS_AS(ppl_attack(m, std::vector<Candidate>{}, cands), InputError);
}

TEST_CASE("flipping score sign and comparison leaves predictions unchanged") {
    const auto m = ModelState::initialize(small_config(), 13);
    const auto known = random_candidates(4, "k", true, 31);
    const auto cands = random_candidates(12, "c", false, 32);
    for (const auto& r : {ppl_attack(m, known, cands), min_k_attack(m, known, cands), min_k_pp_attack(m, known, cands),
                          zlib_attack(m, known, cands)}) {
        const auto flipped = r.orientation == Orientation::lower_is_member ? Orientation::higher_is_member
                                                                           : Orientation::lower_is_member;
        for (const auto& s : r.scored) {
            CHECK(predict_member(s.score, r.threshold, r.orientation) == s.predicted);
            CHECK(predict_member(-s.score, -r.threshold, flipped) == s.predicted);
        }
        const auto ms = r.member_scores();
        for (std::size_t i = 0; i < ms.size(); ++i)
            CHECK(ms[i] == (r.orientation == Orientation::higher_is_member ? r.scored[i].score : -r.scored[i].score));
    }
}

TEST_CASE("score CSV round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "mialab_attack_csv";
    std::filesystem::create_directories(dir);
    AttackResult r{"min-k", Orientation::higher_is_member, -2.5, {{"a", -1.25, true, true}, {"b", -3.0, false, true}}};
    write_scores_csv(r, dir / "s.csv");
    const auto back = read_scores_csv(dir / "s.csv", "min-k", Orientation::higher_is_member);
    REQUIRE(back.scored.size() == 2);
    CHECK(back.scored[0].sample_id == "a");
    CHECK(back.scored[0].score == -1.25);
    CHECK(back.scored[0].predicted);
    CHECK_FALSE(back.scored[1].predicted);
    CHECK(back.scored[1].truth);
}

TEST_CASE("feature attack standardizes on training rows and separates a shifted loss") {
    SplitMix64 rng(5);
    auto make = [&](double shift, std::size_t n) {
        std::vector<FeatureRecord> v(n);
        for (auto& r : v) {
            r.confidence = 0.3 + 0.05 * rng.normal();
            r.entropy = 2.0 + 0.1 * rng.normal();
            r.loss = 2.5 - shift + 0.2 * rng.normal();
            r.vector.resize(8);
            for (auto& x : r.vector) x = rng.normal();
        }
        return v;
    };
    const auto mem = make(1.0, 40), non = make(0.0, 40);
    for (auto s : {Strategy::weighted_concat, Strategy::weighted_sum, Strategy::weighted_mlp}) {
        const auto fusion = FusionConfig::make(s, {}, 8, 3);
        const auto att = train_feature_attack(mem, non, fusion);
        CHECK(att.model.strategy == features::to_string(s));
        const auto tm = make(1.0, 50), tn = make(0.0, 50);
        CHECK(pairwise_auc(score_feature_attack(att, tm), score_feature_attack(att, tn)) > 0.9);
    }
    // joint training of the upsamplers moves them away from their initialization
    const auto fusion = FusionConfig::make(Strategy::weighted_mlp, {}, 8, 3);
    FeatureAttackOptions opts;
    opts.train_upsamplers = true;
    opts.logistic.max_iter = 200;
    const auto joint = train_feature_attack(mem, non, fusion, opts);
    CHECK(joint.fusion.mlps[2].w2 != fusion.mlps[2].w2);
    const auto tm = make(1.0, 50), tn = make(0.0, 50);
    CHECK(pairwise_auc(score_feature_attack(joint, tm), score_feature_attack(joint, tn)) > 0.9);

    FeatureAttackOptions mlp_opts;
    mlp_opts.mlp_classifier = true;
    const auto with_mlp = train_feature_attack(mem, non, FusionConfig::make(Strategy::weighted_concat, {}, 8, 3),
                                               mlp_opts);
    REQUIRE(with_mlp.mlp.has_value());
    CHECK(pairwise_auc(score_feature_attack(with_mlp, tm), score_feature_attack(with_mlp, tn)) > 0.85);
}

TEST_CASE("joint training matches a finite-difference gradient on the upsampler") {
    SplitMix64 rng(6);
    std::vector<FeatureRecord> rows(6);
    for (auto& r : rows) {
        r.confidence = rng.normal();
        r.entropy = rng.normal();
        r.loss = rng.normal();
        r.vector = {rng.normal(), rng.normal()};
    }
    const std::vector<int> y = {1, 0, 1, 0, 1, 0};
    const auto fusion = FusionConfig::make(Strategy::weighted_mlp_compress, {}, 2, 4);
    const LogisticConfig one_step{.learning_rate = 1.0, .l2 = 0.0, .max_iter = 2, .tolerance = 0.0};
    // after one step from w = 0 the upsampler gradient is zero; the second step
    // moves the upsampler by -lr * grad evaluated at the first-step weights
    const auto j1 = train_logistic_joint(rows, y, fusion, {.learning_rate = 1.0, .l2 = 0.0, .max_iter = 1, .tolerance = 0.0});
    CHECK(j1.fusion.mlps[0].w2 == fusion.mlps[0].w2);
    const auto j2 = train_logistic_joint(rows, y, fusion, one_step);

    auto loss_at = [&](const FusionConfig& f) {
        const auto x = features::fuse(rows, f);
        double l = 0.0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            double z = j1.model.bias;
            for (std::size_t k = 0; k < x.cols; ++k) z += j1.model.weights[k] * x.row(i)[k];
            const double p = 1.0 / (1.0 + std::exp(-z));
            l -= y[i] ? std::log(p) : std::log(1 - p);
        }
        return l / static_cast<double>(rows.size());
    };
    for (std::size_t q : {0u, 1u}) {
        auto plus = j1.fusion, minus = j1.fusion;
        const double h = 1e-6;
        plus.mlps[2].b2[q] += h;
        minus.mlps[2].b2[q] -= h;
        const double fd = (loss_at(plus) - loss_at(minus)) / (2 * h);
        CHECK(j1.fusion.mlps[2].b2[q] - j2.fusion.mlps[2].b2[q] == doctest::Approx(fd).epsilon(1e-5));
    }
    for (std::size_t q : {0u, 3u}) {
        auto plus = j1.fusion, minus = j1.fusion;
        const double h = 1e-6;
        plus.compress[q] += h;
        minus.compress[q] -= h;
        const double fd = (loss_at(plus) - loss_at(minus)) / (2 * h);
        CHECK(j1.fusion.compress[q] - j2.fusion.compress[q] == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("shadow attack: lineage, determinism, untrained shadow is uninformative") {
    const auto init = ModelState::initialize(small_config(), 77);
    const auto known = random_candidates(24, "known-", true, 41);
    const auto background = random_candidates(24, "bg-", false, 42);
    const auto holdout = random_candidates(100, "holdout-", true, 43);
    const auto evaluation = random_candidates(100, "eval-", false, 44);
    const auto fusion = FusionConfig::make(Strategy::weighted_concat, {}, 16, 5);

    ShadowConfig cfg;
    cfg.epochs = 0;
    const auto sa = shadow_attack(known, background, init, cfg, fusion, 9);
    CHECK(sa.shadow == init);
    CHECK(sa.shadow_members.size() == 24);
    CHECK(sa.shadow_non_members.size() == 24);
    std::set<std::string> seen(sa.shadow_members.begin(), sa.shadow_members.end());
    for (const auto& id : sa.shadow_non_members) CHECK(seen.insert(id).second);
    CHECK(seen.size() == 48);
    for (const auto& id : seen) CHECK((id.rfind("known-", 0) == 0 || id.rfind("bg-", 0) == 0));

    std::vector<FeatureRecord> hold_rec, eval_rec;
    for (const auto& c : holdout) hold_rec.push_back(features::extract_features(init, c.tokens));
    for (const auto& c : evaluation) eval_rec.push_back(features::extract_features(init, c.tokens));
    const auto pos = score_feature_attack(sa.attack, hold_rec), neg = score_feature_attack(sa.attack, eval_rec);
    CHECK(std::abs(pairwise_auc(pos, neg) - 0.5) <= 0.1);

    cfg.epochs = 2;
    const auto t1 = shadow_attack(known, background, init, cfg, fusion, 9);
    const auto t2 = shadow_attack(known, background, init, cfg, fusion, 9);
    CHECK(t1.shadow == t2.shadow);
    CHECK(t1.attack.model.weights == t2.attack.model.weights);
    CHECK(t1.attack.model.bias == t2.attack.model.bias);
    CHECK_FALSE(t1.shadow == init);

    CHECK_THROWS_AS(shadow_attack(std::span<const Candidate>(known).first(2), std::span<const Candidate>(background).first(2),
                                  init, cfg, fusion, 9),
                    InputError);
}
