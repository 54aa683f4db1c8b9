#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"
#include "mialab/distill/distill.hpp"
#include "mialab/nn/ops.hpp"

using namespace mialab;
using namespace mialab::nn;
using namespace mialab::distill;

namespace {

ModelConfig small_config(std::size_t vocab = 24) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 16;
    return c;
}

// Sequences of the form a, a+s, a+2s, ... (mod range) starting after <eos>-like id 2.
std::vector<TokenSequence> arithmetic_sequences(std::size_t count, std::size_t vocab, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<TokenSequence> out;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t start = 3 + rng.below(vocab - 3), step = 1 + rng.below(3);
        TokenSequence s;
        for (std::size_t k = 0; k < 8; ++k) s.push_back(static_cast<TokenId>(3 + (start - 3 + k * step) % (vocab - 3)));
        out.push_back(s);
    }
    return out;
}

std::vector<float> random_logits(std::size_t n, SplitMix64& rng, double scale = 3.0) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(scale * rng.normal());
    return v;
}

// KL(p || q) summed over a row, both given as probabilities.
double kl(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k)
        if (p[k] > 0) s += p[k] * std::log(p[k] / q[k]);
    return s;
}

std::vector<double> direct_softmax(std::vector<double> z, double t) {
    double sum = 0.0;
    for (auto& x : z) sum += (x = std::exp(x / t));
    for (auto& x : z) x /= sum;
    return z;
}

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "mialab_test_distill";
    std::filesystem::create_directories(dir);
    return dir / name;
}

struct Fixture {
    ModelState teacher;
    ModelState student;
    std::vector<TokenSequence> members;
    std::vector<TokenSequence> non_members;

    explicit Fixture(bool binary_head = false) {
        const auto cfg = small_config();
        members = arithmetic_sequences(24, cfg.vocab_size, 1);
        non_members = arithmetic_sequences(32, cfg.vocab_size, 2);
        TrainOptions o;
        o.adam.learning_rate = 3e-3;
        o.seed = 4;
        teacher = train_lm(ModelState::initialize(cfg, 10), members, 10, o);
        student = ModelState::initialize(cfg, 11, binary_head);
    }
};

}  // namespace

TEST_CASE("soft_labels examples") {
    const std::vector<float> equal = {0.7f, 0.7f, 0.7f, 0.7f};
    for (double p : soft_labels(equal, 4, 3.0)) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));

    const std::vector<float> row = {2.0f, 0.0f, 0.0f};
    const auto got = soft_labels(row, 3, 2.0);
    const double e = std::exp(1.0);
    CHECK(got[0] == doctest::Approx(e / (e + 2.0)).epsilon(1e-12));
    CHECK(got[1] == doctest::Approx(1.0 / (e + 2.0)).epsilon(1e-12));

    SplitMix64 rng(3);
    const auto logits = random_logits(5 * 7, rng);
    const auto t1 = soft_labels(logits, 7, 1.0);
    for (std::size_t r = 0; r < 5; ++r) {
        std::vector<double> z(logits.begin() + r * 7, logits.begin() + r * 7 + 7);
        const auto plain = direct_softmax(z, 1.0);
        double sum = 0.0;
        for (std::size_t k = 0; k < 7; ++k) {
            CHECK(t1[r * 7 + k] == doctest::Approx(plain[k]).epsilon(1e-9));
            sum += t1[r * 7 + k];
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
    CHECK_THROWS_AS(soft_labels(row, 3, 0.0), InputError);
    CHECK_THROWS_AS(soft_labels(row, 3, -1.0), InputError);
}

TEST_CASE("soft_loss two-term oracle") {
    const std::vector<float> t = {1.0f, 0.0f}, s = {0.0f, 1.0f};
    const double a = std::exp(1.0) / (std::exp(1.0) + 1.0), b = 1.0 - a;
    const double oracle = a * std::log(a / b) + b * std::log(b / a);
    CHECK(soft_loss(t, s, 2, 1.0) == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(soft_loss(t, s, 2, 1.0) == doctest::Approx(0.462).epsilon(1e-3));
}

TEST_CASE("soft_loss temperature scaling against explicit sums") {
    SplitMix64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t v = 6, n = 3;
        const auto t = random_logits(n * v, rng), s = random_logits(n * v, rng);
        for (double temp : {1.0, 2.0}) {
            double sum = 0.0;
            for (std::size_t r = 0; r < n; ++r) {
                std::vector<double> tr(t.begin() + r * v, t.begin() + r * v + v), sr(s.begin() + r * v, s.begin() + r * v + v);
                sum += kl(direct_softmax(tr, temp), direct_softmax(sr, temp));
            }
            const double oracle = temp * temp * sum / static_cast<double>(n);
            CHECK(soft_loss(t, s, v, temp) == doctest::Approx(oracle).epsilon(1e-9));
        }
    }
}

TEST_CASE("soft_loss identity, nonnegativity and errors") {
    SplitMix64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto t = random_logits(4 * 9, rng, 5.0), s = random_logits(4 * 9, rng, 5.0);
        const double temp = 0.1 + 10.0 * rng.uniform();
        CHECK(std::abs(soft_loss(t, t, 9, temp)) < 1e-7);
        CHECK(soft_loss(t, s, 9, temp) >= -1e-6);
    }
    const std::vector<float> a = {1, 2, 3, 4}, b = {1, 2, 3};
    CHECK_THROWS_AS(soft_loss(a, b, 2, 1.0), InputError);
    CHECK_THROWS_AS(soft_loss(a, a, 2, 0.0), InputError);
}

TEST_CASE("soft_loss clamps vanishing student probabilities") {
    // student assigns ~e^-200 to a class the teacher likes: clamp at 1e-9
    const std::vector<float> t = {0.0f, 0.0f}, s = {200.0f, 0.0f};
    const double oracle = 0.5 * std::log(0.5 / 1.0) + 0.5 * std::log(0.5 / 1e-9);
    CHECK(soft_loss(t, s, 2, 1.0) == doctest::Approx(oracle).epsilon(1e-6));
}

TEST_CASE("hard_loss cases") {
    const auto cfg = small_config();
    auto model = ModelState::initialize(cfg, 3, true);
    LabeledSequence sample{{3, 4, 5, 6, 7}, true};
    const auto pair = next_token_pair(sample.tokens);
    auto trace = forward(model, pair.inputs);

    CHECK(hard_loss(sample, trace, HardLabelMode::token_ce) == lm_loss(trace, pair.targets));

    trace.binary_logits = {60.0f, -60.0f};
    CHECK(hard_loss(sample, trace, HardLabelMode::binary_head) == doctest::Approx(0.0).epsilon(1e-12));
    trace.binary_logits = {0.25f, 0.25f};
    CHECK(hard_loss(sample, trace, HardLabelMode::binary_head) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    sample.member = false;
    CHECK(hard_loss(sample, trace, HardLabelMode::binary_head) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    const auto plain = ModelState::initialize(cfg, 3);
    const auto no_head = forward(plain, pair.inputs);
    CHECK_THROWS_AS(hard_loss(sample, no_head, HardLabelMode::binary_head), ConfigError);
}

TEST_CASE("member and non-member mixtures") {
    CHECK(member_loss(1.3, 0.4, 1.0) == 1.3);
    CHECK(nonmember_loss(1.3, 0.4, 1.0) == 0.4);
    CHECK(member_loss(1.0, 0.2, 0.5) == doctest::Approx(0.6));
    CHECK(nonmember_loss(1.0, 0.2, 0.5) == doctest::Approx(0.6));
    CHECK_THROWS_AS(member_loss(1, 1, 1.5), InputError);
    CHECK_THROWS_AS(nonmember_loss(1, 1, -0.1), InputError);

    SplitMix64 rng(77);
    for (int i = 0; i < 1000; ++i) {
        const double h = 10 * rng.uniform(), s = 10 * rng.uniform(), a = rng.uniform();
        CHECK(std::abs(member_loss(h, s, a) - nonmember_loss(h, s, 1.0 - a)) < 1e-12);
    }
}

TEST_CASE("DistillConfig validation and json") {
    DistillConfig c;
    CHECK(c.problems().empty());
    c.alpha = 1.5;
    c.temperature = 0.0;
    CHECK(c.problems().size() == 2);
    DistillConfig d;
    d.alpha = 0.3;
    d.hard_label_mode = HardLabelMode::binary_head;
    nlohmann::json j = d;
    const auto back = j.get<DistillConfig>();
    CHECK(back.alpha == 0.3);
    CHECK(back.hard_label_mode == HardLabelMode::binary_head);
    CHECK_THROWS_AS(hard_label_mode_from_string("soft"), ConfigError);
}

TEST_CASE("zero epochs return the student unchanged") {
    Fixture f;
    DistillConfig c;
    c.epochs_nonmember = 0;
    c.epochs_member = 0;
    CHECK(distill::distill(f.teacher, f.student, f.non_members, f.members, c) == f.student);
    c.lora_rank = 2;
    CHECK(distill::distill(f.teacher, f.student, f.non_members, f.members, c) == f.student);
}

TEST_CASE("distillation never mutates the teacher and is deterministic") {
    Fixture f;
    const ModelState before = f.teacher;
    DistillConfig c;
    c.epochs_nonmember = 2;
    c.epochs_member = 2;
    const auto a = distill::distill(f.teacher, f.student, f.non_members, f.members, c);
    const auto b = distill::distill(f.teacher, f.student, f.non_members, f.members, c);
    CHECK(f.teacher == before);
    CHECK(a == b);
    CHECK_FALSE(a == f.student);
}

TEST_CASE("log: mixture identity on every batch and phase ordering") {
    for (auto mode : {HardLabelMode::token_ce, HardLabelMode::binary_head}) {
        Fixture f(mode == HardLabelMode::binary_head);
        DistillConfig c;
        c.alpha = 0.3;
        c.epochs_nonmember = 2;
        c.epochs_member = 3;
        c.hard_label_mode = mode;
        DistillLog log;
        distill::distill(f.teacher, f.student, f.non_members, f.members, c, nullptr, &log);
        REQUIRE(log.batches.size() == 2 * 4 + 3 * 3);
        bool member_seen = false;
        for (const auto& b : log.batches) {
            const double expect = b.phase == Phase::member ? b.alpha * b.loss.hard + (1 - b.alpha) * b.loss.soft
                                                           : (1 - b.alpha) * b.loss.hard + b.alpha * b.loss.soft;
            CHECK(std::abs(b.loss.combined - expect) < 1e-6);
            CHECK(b.loss.hard >= 0.0);
            CHECK(b.loss.soft >= -1e-6);
            if (b.phase == Phase::member) member_seen = true;
            else CHECK_FALSE(member_seen);
        }
        REQUIRE(log.epochs.size() == 5);
        CHECK(log.epochs[1].phase == Phase::nonmember);
        CHECK(log.epochs[2].phase == Phase::member);
        CHECK(log.epochs[2].epoch == 0);
    }
}

TEST_CASE("swapping the data sets at alpha 0.5 keeps the per-batch symmetry") {
    Fixture f;
    DistillConfig c;
    c.alpha = 0.5;
    c.epochs_nonmember = 1;
    c.epochs_member = 1;
    DistillLog straight, swapped;
    distill::distill(f.teacher, f.student, f.non_members, f.members, c, nullptr, &straight);
    distill::distill(f.teacher, f.student, f.members, f.non_members, c, nullptr, &swapped);
    for (const auto* log : {&straight, &swapped}) {
        for (const auto& b : log->batches) {
            CHECK(std::abs(member_loss(b.loss.hard, b.loss.soft, 0.5) - nonmember_loss(b.loss.hard, b.loss.soft, 0.5)) <
                  1e-12);
            CHECK(std::abs(b.loss.combined - 0.5 * (b.loss.hard + b.loss.soft)) < 1e-6);
        }
    }
    CHECK(swapped.batches.size() == straight.batches.size());
}

TEST_CASE("soft-only distillation pulls the student toward the teacher") {
    Fixture f;
    DistillConfig c;
    c.alpha = 1.0;
    c.epochs_nonmember = 8;
    c.epochs_member = 0;
    c.adam.learning_rate = 3e-3;
    auto mean_soft = [&](const ModelState& s) {
        double total = 0.0;
        for (const auto& seq : f.non_members) {
            const auto p = next_token_pair(seq);
            total += soft_loss(forward(f.teacher, p.inputs).logits, forward(s, p.inputs).logits, 24, c.temperature);
        }
        return total / static_cast<double>(f.non_members.size());
    };
    const auto ref = distill::distill(f.teacher, f.student, f.non_members, f.members, c);
    CHECK(mean_soft(ref) < 0.7 * mean_soft(f.student));
}

TEST_CASE("default schedule: reference fits members better than non-members") {
    // i.i.d. random token strings: nothing to learn except the member strings themselves
    const auto cfg = small_config();
    SplitMix64 rng(21);
    auto random_strings = [&](std::size_t count) {
        std::vector<TokenSequence> out(count);
        for (auto& s : out)
            for (int k = 0; k < 10; ++k) s.push_back(static_cast<TokenId>(3 + rng.below(cfg.vocab_size - 3)));
        return out;
    };
    const auto members = random_strings(24), non_members = random_strings(32);
    TrainOptions o;
    o.adam.learning_rate = 3e-3;
    const auto base = ModelState::initialize(cfg, 12);
    const auto teacher = train_lm(base, members, 30, o);
    REQUIRE(mean_lm_loss(teacher, members) < mean_lm_loss(teacher, non_members));
    const auto ref = distill::distill(teacher, base, non_members, members, DistillConfig{});
    CHECK(mean_lm_loss(ref, members) < mean_lm_loss(ref, non_members));
}

TEST_CASE("lora distillation trains and only moves attention weights and the head") {
    Fixture f(true);
    DistillConfig c;
    c.epochs_nonmember = 1;
    c.epochs_member = 1;
    c.lora_rank = 2;
    c.hard_label_mode = HardLabelMode::binary_head;
    const auto ref = distill::distill(f.teacher, f.student, f.non_members, f.members, c);
    for (std::size_t i = 0; i < ref.params.size(); ++i) {
        const auto& name = ref.params[i].name;
        const bool changed = !(ref.params[i] == f.student.params[i]);
        const bool allowed = name.find(".attn.w") != std::string::npos || name.rfind("binary_head", 0) == 0;
        if (!allowed) CHECK_MESSAGE(!changed, name);
        if (name.rfind("binary_head", 0) == 0) CHECK(changed);
    }
}

TEST_CASE("vocabulary alignment") {
    const auto teacher = ModelState::initialize(small_config(120), 1);
    const auto student = ModelState::initialize(small_config(100), 2);
    const auto same = truncate_vocabulary(teacher, teacher);
    CHECK(same.identity());
    CHECK(same.shared == 120);

    const auto a = truncate_vocabulary(teacher, student);
    CHECK_FALSE(a.identity());
    CHECK(a.shared == 100);

    const TokenSequence seq = {3, 4, 5, 6, 7};
    const auto t = forward(teacher, seq);
    const auto cut = a.restrict(t.logits, 120);
    REQUIRE(cut.size() == 5 * 100);
    const auto rows = soft_labels(cut, 100, 2.0);
    const auto full = soft_labels(t.logits, 120, 2.0);
    for (std::size_t r = 0; r < 5; ++r) {
        double sum = 0.0;
        for (std::size_t k = 0; k < 100; ++k) sum += rows[r * 100 + k];
        CHECK(std::abs(sum - 1.0) < 1e-6);
        // KL(truncated || full) is -log(mass kept) >= 0
        std::vector<double> p(full.begin() + r * 120, full.begin() + r * 120 + 120);
        std::vector<double> q(120, 0.0);
        for (std::size_t k = 0; k < 100; ++k) q[k] = rows[r * 100 + k];
        double mass = 0.0, div = 0.0;
        for (std::size_t k = 0; k < 100; ++k) {
            mass += p[k];
            div += q[k] * std::log(q[k] / p[k]);
        }
        CHECK(div >= 0.0);
        CHECK(div == doctest::Approx(-std::log(mass)).epsilon(1e-6));
    }

    CHECK_THROWS_AS(distill::distill(teacher, student, {&seq, 1}, {&seq, 1}, DistillConfig{}), ConfigError);
    DistillConfig c;
    c.epochs_nonmember = 1;
    c.epochs_member = 1;
    const auto ref = distill::distill(teacher, student, {&seq, 1}, {&seq, 1}, c, &a);
    CHECK(ref.config.vocab_size == 100);
}

TEST_CASE("distill input errors") {
    Fixture f;
    CHECK_THROWS_AS(distill::distill(f.teacher, f.student, {}, f.members, DistillConfig{}), InputError);
    CHECK_THROWS_AS(distill::distill(f.teacher, f.student, f.non_members, {}, DistillConfig{}), InputError);
    DistillConfig c;
    c.hard_label_mode = HardLabelMode::binary_head;
    CHECK_THROWS_AS(distill::distill(f.teacher, f.student, f.non_members, f.members, c), ConfigError);
}

TEST_CASE("distillation log csv") {
    Fixture f;
    DistillConfig c;
    c.epochs_nonmember = 2;
    c.epochs_member = 1;
    DistillLog log;
    distill::distill(f.teacher, f.student, f.non_members, f.members, c, nullptr, &log);
    const auto path = temp_file("log.csv");
    log.write_csv(path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,phase,hard,soft,combined");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        if (rows == 1) CHECK(line.rfind("0,non-member,", 0) == 0);
        if (rows == 3) CHECK(line.rfind("0,member,", 0) == 0);
    }
    CHECK(rows == 3);
}
