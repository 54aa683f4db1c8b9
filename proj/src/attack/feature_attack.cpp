#include <nlohmann/json.hpp>

#include "mialab/attack/attack.hpp"
#include "mialab/common/error.hpp"
#include "mialab/common/rng.hpp"
#include "mialab/nn/lora.hpp"

namespace mialab::attack {

FeatureAttack train_feature_attack(std::span<const features::FeatureRecord> members,
                                   std::span<const features::FeatureRecord> non_members,
                                   const features::FusionConfig& fusion, const FeatureAttackOptions& options) {
    std::vector<features::FeatureRecord> rows(members.begin(), members.end());
    rows.insert(rows.end(), non_members.begin(), non_members.end());
    std::vector<int> labels(rows.size(), 0);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(members.size()), 1);

    FeatureAttack out;
    out.fusion = fusion;
    out.standardizer = features::Standardizer::fit(rows);
    const auto z = out.standardizer.apply(rows);
    if (options.train_upsamplers) {
        auto joint = train_logistic_joint(z, labels, fusion, options.logistic);
        out.fusion = std::move(joint.fusion);
        out.model = std::move(joint.model);
    } else {
        out.model = train_logistic(features::fuse(z, fusion), labels, options.logistic);
    }
    if (options.mlp_classifier)
        out.mlp = train_mlp_classifier(features::fuse(z, out.fusion), labels, options.mlp);
    out.model.strategy = features::to_string(fusion.strategy);
    out.model.fusion_weights = fusion.weights;
    return out;
}

std::vector<double> score_feature_attack(const FeatureAttack& attack, std::span<const features::FeatureRecord> records) {
    const auto x = features::fuse(attack.standardizer.apply(records), attack.fusion);
    if (attack.mlp) return mlp_classifier_infer(*attack.mlp, x);
    return attack_infer(attack.model, x).probability;
}

AttackResult run_feature_attack(const std::string& name, const FeatureAttack& attack,
                                std::span<const features::FeatureRecord> records,
                                std::span<const std::string> sample_ids, std::span<const bool> truth) {
    if (sample_ids.size() != records.size() || truth.size() != records.size())
        throw InputError(name + ": ids, labels and records differ in length");
    const auto p = score_feature_attack(attack, records);
    AttackResult r;
    r.attack = name;
    r.orientation = Orientation::higher_is_member;
    r.threshold = 0.5;
    r.scored.reserve(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) r.scored.push_back({sample_ids[i], p[i], p[i] >= 0.5, truth[i]});
    return r;
}

void to_json(nlohmann::json& j, const ShadowConfig& c) {
    j = nlohmann::ordered_json{
        {"epochs", c.epochs}, {"learning_rate", c.learning_rate}, {"lora_rank", c.lora_rank}, {"batch_size", c.batch_size}};
}

void from_json(const nlohmann::json& j, ShadowConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lora_rank = j.value("lora_rank", c.lora_rank);
    c.batch_size = j.value("batch_size", c.batch_size);
}

ShadowAttack shadow_attack(std::span<const Candidate> known_members, std::span<const Candidate> non_members,
                           const nn::ModelState& shadow_init, const ShadowConfig& config,
                           const features::FusionConfig& fusion, std::uint64_t seed,
                           const FeatureAttackOptions& options) {
    std::vector<const Candidate*> pool;
    for (const auto& c : known_members) pool.push_back(&c);
    for (const auto& c : non_members) pool.push_back(&c);
    if (pool.size() < 8) throw InputError("shadow attack: pool of " + std::to_string(pool.size()) + " is too small");
    if (config.batch_size == 0) throw ConfigError("shadow attack: batch_size must be >= 1");
    if (!(config.learning_rate > 0.0)) throw ConfigError("shadow attack: learning_rate must be > 0");

    SplitMix64 rng(derive_seed(seed, "shadow-split"));
    const auto order = permutation(pool.size(), rng);
    const std::size_t half = pool.size() / 2;

    ShadowAttack out;
    std::vector<nn::TokenSequence> train;
    std::vector<const Candidate*> in, held;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const Candidate* c = pool[order[i]];
        if (i < half) {
            in.push_back(c);
            train.push_back(c->tokens);
            out.shadow_members.push_back(c->sample_id);
        } else {
            held.push_back(c);
            out.shadow_non_members.push_back(c->sample_id);
        }
    }

    nn::TrainOptions topts;
    topts.adam.learning_rate = config.learning_rate;
    topts.batch_size = config.batch_size;
    topts.seed = derive_seed(seed, "shadow-train");
    if (config.lora_rank > 0) {
        auto adapter =
            nn::LoraAdapter::create(shadow_init.config, config.lora_rank, 1.0, derive_seed(seed, "shadow-lora"));
        out.shadow = nn::train_lm(shadow_init, train, config.epochs, topts, &adapter);
    } else {
        out.shadow = nn::train_lm(shadow_init, train, config.epochs, topts);
    }

    std::vector<features::FeatureRecord> mem, non;
    for (const auto* c : in) mem.push_back(features::extract_features(out.shadow, c->tokens));
    for (const auto* c : held) non.push_back(features::extract_features(out.shadow, c->tokens));
    out.attack = train_feature_attack(mem, non, fusion, options);
    return out;
}

}  // namespace mialab::attack
