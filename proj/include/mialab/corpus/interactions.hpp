#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nlohmann/json_fwd.hpp"

namespace mialab::corpus {

enum class PreferenceMode { with_labels, history_only };

struct InteractionRecord {
    std::uint64_t user_id = 0;
    std::vector<std::string> history;  // oldest first
    std::string candidate_item;
    std::optional<bool> preference;  // absent for history-only data
};

/// Synthetic taste model: items are spread over genres, each user prefers a
/// few genres and draws most of their history from them. With labels, the
/// candidate is drawn half from preferred genres and labelled by genre match,
/// flipped with probability label_noise.
struct SynthConfig {
    std::uint64_t seed = 1;
    std::size_t n_users = 1000;
    std::size_t n_items = 120;
    std::size_t min_history = 4;
    std::size_t max_history = 8;
    PreferenceMode mode = PreferenceMode::with_labels;
    std::size_t n_genres = 8;
    std::size_t preferred_genres = 2;
    double in_genre_rate = 0.8;
    double label_noise = 0.1;
    std::size_t item_words = 1;  // words per item name (1 or 2)

    /// Every violated constraint, empty when the config is usable.
    std::vector<std::string> problems() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

std::string to_string(PreferenceMode mode);
PreferenceMode preference_mode_from_string(const std::string& name);

/// Deterministic pronounceable item names. With one word per item every name
/// is a distinct capitalized word; with two, names are distinct word pairs
/// drawn from a pool of about sqrt(2 n_items) words.
std::vector<std::string> item_names(std::size_t n_items, std::size_t item_words = 1);

/// Genre of item i (items are dealt round-robin over genres).
std::size_t item_genre(std::size_t item, std::size_t n_genres);

std::vector<InteractionRecord> synth_interactions(const SynthConfig& config);

}  // namespace mialab::corpus
