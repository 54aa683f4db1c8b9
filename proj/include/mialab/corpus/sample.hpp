#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mialab/corpus/interactions.hpp"

namespace mialab::corpus {

enum class Membership { member, non_member };

enum class Split { target_train, attacker_known_member, attacker_non_member, holdout_member };

struct Sample {
    std::string text;
    std::string target_text;
    Membership membership = Membership::non_member;
    Split split = Split::attacker_non_member;

    bool operator==(const Sample&) const = default;
};

std::string to_string(Membership m);
std::string to_string(Split s);
Membership membership_from_string(std::string_view name);
Split split_from_string(std::string_view name);

/// Split tag must agree with membership.
bool consistent(const Sample& s);

struct RenderedText {
    std::string text;
    std::string target_text;
};

inline constexpr std::string_view kPreferenceTemplate = "preference";
inline constexpr std::string_view kNextItemTemplate = "next-item";

std::vector<std::string> template_ids();

/// "preference" when the record carries a label, "next-item" otherwise.
std::string_view default_template(const InteractionRecord& record);

/// Renders the prompt (history oldest first, then the question) and the
/// expected answer. The preference template needs a labelled record.
RenderedText render_sample(const InteractionRecord& record, std::string_view template_id);

/// Prompt and answer joined the way models see them during training.
std::string full_text(const Sample& s);

/// One JSON object per line: text, target_text, membership, split.
void write_jsonl(const std::vector<Sample>& samples, const std::filesystem::path& path);
std::vector<Sample> read_jsonl(const std::filesystem::path& path);

}  // namespace mialab::corpus
