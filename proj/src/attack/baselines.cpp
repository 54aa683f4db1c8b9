#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "mialab/attack/attack.hpp"
#include "mialab/common/error.hpp"
#include "mialab/nn/ops.hpp"
#include "mialab/nn/transformer.hpp"

namespace mialab::attack {

std::vector<double> AttackResult::member_scores() const {
    std::vector<double> out;
    out.reserve(scored.size());
    for (const auto& s : scored) out.push_back(orientation == Orientation::higher_is_member ? s.score : -s.score);
    return out;
}

bool predict_member(double score, double threshold, Orientation orientation) {
    return orientation == Orientation::lower_is_member ? score < threshold : score > threshold;
}

void write_scores_csv(const AttackResult& result, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "sample_id,score,predicted,truth\n";
    char buf[32];
    for (const auto& s : result.scored) {
        std::snprintf(buf, sizeof buf, "%.17g", s.score);
        out << s.sample_id << ',' << buf << ',' << (s.predicted ? 1 : 0) << ',' << (s.truth ? 1 : 0) << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

AttackResult read_scores_csv(const std::filesystem::path& path, const std::string& attack, Orientation orientation) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "sample_id,score,predicted,truth")
        throw FormatError(path.string() + ": unexpected header");
    AttackResult r;
    r.attack = attack;
    r.orientation = orientation;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
        if (cells.size() != 4) throw FormatError(where + "expected 4 cells");
        auto flag = [&](const std::string& c) {
            if (c != "0" && c != "1") throw FormatError(where + "flag must be 0 or 1");
            return c == "1";
        };
        ScoredSample s;
        s.sample_id = cells[0];
        try {
            s.score = std::stod(cells[1]);
        } catch (const std::logic_error&) {
            throw FormatError(where + "score is not a number");
        }
        s.predicted = flag(cells[2]);
        s.truth = flag(cells[3]);
        r.scored.push_back(std::move(s));
    }
    return r;
}

TokenStats token_stats(const nn::ModelState& model, std::span<const nn::TokenId> sequence) {
    if (sequence.size() < 2) throw InputError("token_stats: need at least two tokens");
    const auto pair = nn::next_token_pair(sequence);
    const auto trace = nn::forward(model, pair.inputs);
    TokenStats s;
    for (std::size_t pos = 0; pos < trace.seq_len; ++pos) {
        const auto lp = nn::log_softmax(trace.logits_row(pos));
        double mu = 0.0, sq = 0.0;
        for (double l : lp) {
            const double p = std::exp(l);
            mu += p * l;
            sq += p * l * l;
        }
        s.log_prob.push_back(lp[pair.targets[pos]]);
        s.mu.push_back(mu);
        s.sigma.push_back(std::sqrt(std::max(0.0, sq - mu * mu)));
    }
    return s;
}

std::size_t min_k_count(std::size_t n, double k_percent) {
    if (n == 0) throw InputError("min-k: empty sequence");
    if (!(k_percent > 0.0 && k_percent <= 100.0)) throw InputError("min-k: k must be in (0, 100]");
    // small epsilon keeps exact products such as 20% of 10 from flooring to 1
    const auto c = static_cast<std::size_t>(std::floor(k_percent * static_cast<double>(n) / 100.0 + 1e-9));
    return std::clamp<std::size_t>(c, 1, n);
}

double lowest_k_mean(std::vector<double> values, double k_percent) {
    const std::size_t c = min_k_count(values.size(), k_percent);
    std::partial_sort(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(c), values.end());
    double s = 0.0;
    for (std::size_t i = 0; i < c; ++i) s += values[i];
    return s / static_cast<double>(c);
}

double min_k_score(const nn::ModelState& model, std::span<const nn::TokenId> sequence, double k_percent) {
    return lowest_k_mean(token_stats(model, sequence).log_prob, k_percent);
}

double min_k_pp_score(const nn::ModelState& model, std::span<const nn::TokenId> sequence, double k_percent) {
    const auto s = token_stats(model, sequence);
    std::vector<double> z(s.log_prob.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = (s.log_prob[i] - s.mu[i]) / std::max(s.sigma[i], 1e-8);
    return lowest_k_mean(std::move(z), k_percent);
}

std::size_t zlib_length(std::string_view text) {
    uLongf cap = compressBound(static_cast<uLong>(text.size()));
    std::vector<Bytef> buf(cap);
    const int rc = compress2(buf.data(), &cap, reinterpret_cast<const Bytef*>(text.data()),
                             static_cast<uLong>(text.size()), 6);
    if (rc != Z_OK) throw NumericError("zlib compression failed with code " + std::to_string(rc));
    return cap;
}

double perplexity(const nn::ModelState& model, std::span<const nn::TokenId> sequence) {
    if (sequence.size() < 2) throw InputError("perplexity: need at least two tokens");
    const auto pair = nn::next_token_pair(sequence);
    return std::exp(nn::lm_loss(nn::forward(model, pair.inputs), pair.targets));
}

double zlib_score(const nn::ModelState& model, const Candidate& c) {
    if (c.text.empty()) throw InputError("zlib score: empty text for " + c.sample_id);
    if (c.tokens.size() < 2) throw InputError("zlib score: need at least two tokens");
    const auto pair = nn::next_token_pair(c.tokens);
    const double total = nn::lm_loss(nn::forward(model, pair.inputs), pair.targets) *
                         static_cast<double>(pair.targets.size());
    return total / static_cast<double>(zlib_length(c.text));
}

namespace {

template <class Score>
AttackResult threshold_attack(const std::string& name, Orientation orientation, std::span<const Candidate> known,
                              std::span<const Candidate> candidates, Score score) {
    if (known.empty()) throw InputError(name + ": threshold needs at least one known member");
    double sum = 0.0;
    for (const auto& c : known) sum += score(c);
    AttackResult r;
    r.attack = name;
    r.orientation = orientation;
    r.threshold = sum / static_cast<double>(known.size());
    r.scored.reserve(candidates.size());
    for (const auto& c : candidates) {
        const double s = score(c);
        r.scored.push_back({c.sample_id, s, predict_member(s, r.threshold, orientation), c.member});
    }
    return r;
}

}  // namespace

AttackResult ppl_attack(const nn::ModelState& model, std::span<const Candidate> known,
                        std::span<const Candidate> candidates) {
    return threshold_attack("ppl", Orientation::lower_is_member, known, candidates,
                            [&](const Candidate& c) { return perplexity(model, c.tokens); });
}

AttackResult min_k_attack(const nn::ModelState& model, std::span<const Candidate> known,
                          std::span<const Candidate> candidates, double k) {
    min_k_count(1, k);  // validates k before any forward pass
    return threshold_attack("min-k", Orientation::higher_is_member, known, candidates,
                            [&](const Candidate& c) { return min_k_score(model, c.tokens, k); });
}

AttackResult min_k_pp_attack(const nn::ModelState& model, std::span<const Candidate> known,
                             std::span<const Candidate> candidates, double k) {
    min_k_count(1, k);
    return threshold_attack("min-k-pp", Orientation::higher_is_member, known, candidates,
                            [&](const Candidate& c) { return min_k_pp_score(model, c.tokens, k); });
}

AttackResult zlib_attack(const nn::ModelState& model, std::span<const Candidate> known,
                         std::span<const Candidate> candidates) {
    return threshold_attack("zlib", Orientation::lower_is_member, known, candidates,
                            [&](const Candidate& c) { return zlib_score(model, c); });
}

}  // namespace mialab::attack
