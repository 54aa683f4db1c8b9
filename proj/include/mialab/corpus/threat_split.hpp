#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mialab/corpus/sample.hpp"
#include "nlohmann/json_fwd.hpp"

namespace mialab::corpus {

struct ThreatSplitConfig {
    double member_fraction = 0.8;
    double known_fraction = 0.05;  // share of members the attacker holds
    std::uint64_t seed = 0;

    std::vector<std::string> problems() const;
};

void to_json(nlohmann::json& j, const ThreatSplitConfig& c);
void from_json(const nlohmann::json& j, ThreatSplitConfig& c);

/// floor(x + 1/2), tolerant to representation error just below the half.
std::size_t round_half_up(double x);

struct PartitionedDataset {
    std::vector<Sample> samples;  // input order, membership and split filled in
    std::vector<std::size_t> non_members;
    std::vector<std::size_t> attacker_known;
    std::vector<std::size_t> holdout;

    /// All members, ascending index.
    std::vector<std::size_t> target_train() const;
};

/// |non-member| = round(N (1 - member_fraction)); attacker-known =
/// round(|members| known_fraction); remaining members are holdout.
PartitionedDataset threat_split(std::vector<Sample> samples, const ThreatSplitConfig& config);

}  // namespace mialab::corpus
