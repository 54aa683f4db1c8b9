#include "mialab/corpus/threat_split.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"

namespace mialab::corpus {

std::vector<std::string> ThreatSplitConfig::problems() const {
    std::vector<std::string> out;
    if (!(member_fraction > 0.0 && member_fraction < 1.0)) out.push_back("member_fraction must be in (0, 1)");
    if (!(known_fraction > 0.0 && known_fraction < 1.0)) out.push_back("known_fraction must be in (0, 1)");
    return out;
}

void to_json(nlohmann::json& j, const ThreatSplitConfig& c) {
    j = {{"member_fraction", c.member_fraction}, {"known_fraction", c.known_fraction}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ThreatSplitConfig& c) {
    c.member_fraction = j.at("member_fraction").get<double>();
    c.known_fraction = j.at("known_fraction").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
}

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9)); }

std::vector<std::size_t> PartitionedDataset::target_train() const {
    std::vector<std::size_t> out = attacker_known;
    out.insert(out.end(), holdout.begin(), holdout.end());
    std::sort(out.begin(), out.end());
    return out;
}

PartitionedDataset threat_split(std::vector<Sample> samples, const ThreatSplitConfig& config) {
    if (const auto errs = config.problems(); !errs.empty()) throw InputError("threat_split: " + errs.front());
    const std::size_t n = samples.size();
    if (n < 20) throw InputError("threat_split: need at least 20 samples, got " + std::to_string(n));
    const std::size_t n_non = round_half_up(static_cast<double>(n) * (1.0 - config.member_fraction));
    if (n_non == 0 || n_non >= n) throw InputError("threat_split: fractions leave an empty side");
    const std::size_t n_members = n - n_non;
    const std::size_t n_known = round_half_up(static_cast<double>(n_members) * config.known_fraction);
    if (n_known == 0)
        throw InputError("threat_split: " + std::to_string(n) + " samples give an empty attacker-known set");
    if (n_known >= n_members) throw InputError("threat_split: no holdout members left");

    SplitMix64 rng(derive_seed(config.seed, "threat-split"));
    const auto order = permutation(n, rng);
    PartitionedDataset out;
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = order[r];
        auto& s = samples[i];
        if (r < n_non) {
            s.membership = Membership::non_member;
            s.split = Split::attacker_non_member;
            out.non_members.push_back(i);
        } else if (r < n_non + n_known) {
            s.membership = Membership::member;
            s.split = Split::attacker_known_member;
            out.attacker_known.push_back(i);
        } else {
            s.membership = Membership::member;
            s.split = Split::holdout_member;
            out.holdout.push_back(i);
        }
    }
    for (auto* v : {&out.non_members, &out.attacker_known, &out.holdout}) std::sort(v->begin(), v->end());
    out.samples = std::move(samples);
    return out;
}

}  // namespace mialab::corpus
