#include "mialab/corpus/interactions.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include <nlohmann/json.hpp>

#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"

namespace mialab::corpus {

std::vector<std::string> SynthConfig::problems() const {
    std::vector<std::string> out;
    if (n_users < 1) out.push_back("n_users must be >= 1");
    if (min_history < 1) out.push_back("min_history must be >= 1");
    if (min_history > max_history) out.push_back("min_history must not exceed max_history");
    if (n_items < max_history + 1)
        out.push_back("n_items (" + std::to_string(n_items) + ") must be at least max_history + 1 (" +
                      std::to_string(max_history + 1) + ")");
    if (n_genres < 1 || n_genres > n_items) out.push_back("n_genres must be in [1, n_items]");
    if (preferred_genres < 1 || preferred_genres > n_genres)
        out.push_back("preferred_genres must be in [1, n_genres]");
    if (!(in_genre_rate >= 0.0 && in_genre_rate <= 1.0)) out.push_back("in_genre_rate must be in [0, 1]");
    if (!(label_noise >= 0.0 && label_noise <= 1.0)) out.push_back("label_noise must be in [0, 1]");
    if (item_words != 1 && item_words != 2) out.push_back("item_words must be 1 or 2");
    return out;
}

std::string to_string(PreferenceMode mode) {
    return mode == PreferenceMode::with_labels ? "with-labels" : "history-only";
}

PreferenceMode preference_mode_from_string(const std::string& name) {
    if (name == "with-labels") return PreferenceMode::with_labels;
    if (name == "history-only") return PreferenceMode::history_only;
    throw ConfigError("unknown preference mode '" + name + "' (expected with-labels or history-only)");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"seed", c.seed},
         {"n_users", c.n_users},
         {"n_items", c.n_items},
         {"min_history", c.min_history},
         {"max_history", c.max_history},
         {"mode", to_string(c.mode)},
         {"n_genres", c.n_genres},
         {"preferred_genres", c.preferred_genres},
         {"in_genre_rate", c.in_genre_rate},
         {"label_noise", c.label_noise},
         {"item_words", c.item_words}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.n_users = j.at("n_users").get<std::size_t>();
    c.n_items = j.at("n_items").get<std::size_t>();
    c.min_history = j.at("min_history").get<std::size_t>();
    c.max_history = j.at("max_history").get<std::size_t>();
    c.mode = preference_mode_from_string(j.at("mode").get<std::string>());
    c.n_genres = j.at("n_genres").get<std::size_t>();
    c.preferred_genres = j.at("preferred_genres").get<std::size_t>();
    c.in_genre_rate = j.at("in_genre_rate").get<double>();
    c.label_noise = j.at("label_noise").get<double>();
    c.item_words = j.at("item_words").get<std::size_t>();
}

namespace {

std::vector<std::string> word_pool(std::size_t count) {
    static constexpr std::string_view consonants = "bdfgklmnprstvz";
    static constexpr std::string_view vowels = "aeiou";
    // Words the prompt templates use, so an item can never be mistaken for one.
    static const std::set<std::string> reserved = {"Given", "Will", "Which", "Answer", "Yes", "No"};
    const std::size_t syllables = consonants.size() * vowels.size();
    if (count > syllables * syllables) throw InputError("too many items for the name generator");

    SplitMix64 rng(0x1A2B3C4D5E6F7081ULL);
    std::set<std::string> seen;
    std::vector<std::string> words;
    words.reserve(count);
    while (words.size() < count) {
        std::string word;
        for (int s = 0; s < 2; ++s) {
            const auto k = rng.below(syllables);
            word.push_back(consonants[k / vowels.size()]);
            word.push_back(vowels[k % vowels.size()]);
        }
        word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
        if (reserved.count(word) || !seen.insert(word).second) continue;
        words.push_back(std::move(word));
    }
    return words;
}

}  // namespace

std::vector<std::string> item_names(std::size_t n_items, std::size_t item_words) {
    if (item_words == 1) return word_pool(n_items);
    if (item_words != 2) throw InputError("item_words must be 1 or 2");
    std::size_t pool = 2;
    while (pool * (pool - 1) < 2 * n_items) ++pool;
    const auto words = word_pool(pool);
    SplitMix64 rng(0x5EED0F1E2D3C4B5AULL);
    std::set<std::pair<std::size_t, std::size_t>> seen;
    std::vector<std::string> names;
    names.reserve(n_items);
    while (names.size() < n_items) {
        const auto a = rng.below(pool), b = rng.below(pool);
        if (a == b || !seen.insert({a, b}).second) continue;
        names.push_back(words[a] + " " + words[b]);
    }
    return names;
}

std::size_t item_genre(std::size_t item, std::size_t n_genres) { return item % n_genres; }

namespace {

class UserDrawer {
public:
    UserDrawer(const SynthConfig& c, SplitMix64& rng) : c_(c), rng_(rng), by_genre_(c.n_genres) {
        for (std::size_t i = 0; i < c.n_items; ++i) by_genre_[item_genre(i, c.n_genres)].push_back(i);
    }

    void start_user() {
        auto order = permutation(c_.n_genres, rng_);
        preferred_.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(c_.preferred_genres));
        others_.assign(order.begin() + static_cast<std::ptrdiff_t>(c_.preferred_genres), order.end());
        used_.clear();
    }

    bool prefers(std::size_t genre) const {
        return std::find(preferred_.begin(), preferred_.end(), genre) != preferred_.end();
    }

    std::size_t draw_history_item() {
        for (int attempt = 0; attempt < 64; ++attempt) {
            const std::size_t g = rng_.bernoulli(c_.in_genre_rate) ? preferred_[rng_.below(preferred_.size())]
                                                                   : rng_.below(c_.n_genres);
            if (auto item = draw_unused(g)) return *item;
        }
        return draw_any_unused();
    }

    /// Candidate from a preferred genre with probability 1/2, otherwise from
    /// the remaining genres.
    std::size_t draw_candidate() {
        const bool from_preferred = others_.empty() || rng_.bernoulli(0.5);
        const auto& pool = from_preferred ? preferred_ : others_;
        for (int attempt = 0; attempt < 64; ++attempt)
            if (auto item = draw_unused(pool[rng_.below(pool.size())])) return *item;
        return draw_any_unused();
    }

private:
    std::optional<std::size_t> draw_unused(std::size_t genre) {
        const auto& items = by_genre_[genre];
        const std::size_t item = items[rng_.below(items.size())];
        if (std::find(used_.begin(), used_.end(), item) != used_.end()) return std::nullopt;
        used_.push_back(item);
        return item;
    }

    std::size_t draw_any_unused() {
        std::vector<std::size_t> free;
        for (std::size_t i = 0; i < c_.n_items; ++i)
            if (std::find(used_.begin(), used_.end(), i) == used_.end()) free.push_back(i);
        const std::size_t item = free[rng_.below(free.size())];
        used_.push_back(item);
        return item;
    }

    const SynthConfig& c_;
    SplitMix64& rng_;
    std::vector<std::vector<std::size_t>> by_genre_;
    std::vector<std::size_t> preferred_, others_, used_;
};

}  // namespace

std::vector<InteractionRecord> synth_interactions(const SynthConfig& config) {
    if (const auto errs = config.problems(); !errs.empty()) {
        std::string msg = "synth_interactions: infeasible configuration:";
        for (const auto& e : errs) msg += " " + e + ";";
        throw InputError(msg);
    }
    const auto names = item_names(config.n_items, config.item_words);
    SplitMix64 rng(derive_seed(config.seed, "synth-interactions"));
    UserDrawer drawer(config, rng);

    std::vector<InteractionRecord> records;
    records.reserve(config.n_users);
    for (std::size_t u = 0; u < config.n_users; ++u) {
        drawer.start_user();
        InteractionRecord r;
        r.user_id = u;
        const std::size_t len = config.min_history + rng.below(config.max_history - config.min_history + 1);
        for (std::size_t k = 0; k < len; ++k) r.history.push_back(names[drawer.draw_history_item()]);
        if (config.mode == PreferenceMode::with_labels) {
            const std::size_t candidate = drawer.draw_candidate();
            r.candidate_item = names[candidate];
            bool liked = drawer.prefers(item_genre(candidate, config.n_genres));
            if (rng.bernoulli(config.label_noise)) liked = !liked;
            r.preference = liked;
        } else {
            // the most recent interaction is held out as the answer
            r.candidate_item = names[drawer.draw_history_item()];
        }
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace mialab::corpus
