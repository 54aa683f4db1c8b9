#include "mialab/corpus/sample.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "mialab/common/error.hpp"

namespace mialab::corpus {

std::string to_string(Membership m) { return m == Membership::member ? "member" : "non-member"; }

std::string to_string(Split s) {
    switch (s) {
        case Split::target_train: return "target-train";
        case Split::attacker_known_member: return "attacker-known-member";
        case Split::attacker_non_member: return "attacker-non-member";
        case Split::holdout_member: return "holdout-member";
    }
    return "?";
}

Membership membership_from_string(std::string_view name) {
    if (name == "member") return Membership::member;
    if (name == "non-member") return Membership::non_member;
    throw FormatError("unknown membership '" + std::string(name) + "'");
}

Split split_from_string(std::string_view name) {
    for (auto s : {Split::target_train, Split::attacker_known_member, Split::attacker_non_member,
                   Split::holdout_member})
        if (name == to_string(s)) return s;
    throw FormatError("unknown split '" + std::string(name) + "'");
}

bool consistent(const Sample& s) {
    if (s.split == Split::attacker_non_member) return s.membership == Membership::non_member;
    return s.membership == Membership::member;
}

std::vector<std::string> template_ids() { return {std::string(kPreferenceTemplate), std::string(kNextItemTemplate)}; }

std::string_view default_template(const InteractionRecord& record) {
    return record.preference ? kPreferenceTemplate : kNextItemTemplate;
}

namespace {

std::string history_clause(const InteractionRecord& r) {
    if (r.history.empty()) throw InputError("render_sample: record " + std::to_string(r.user_id) + " has no history");
    std::string s = "Given the user's history: ";
    for (std::size_t i = 0; i < r.history.size(); ++i) {
        if (i) s += ", ";
        s += r.history[i];
    }
    return s + ".";
}

}  // namespace

RenderedText render_sample(const InteractionRecord& record, std::string_view template_id) {
    if (template_id == kPreferenceTemplate) {
        if (!record.preference)
            throw InputError("render_sample: template 'preference' needs a labelled record (user " +
                             std::to_string(record.user_id) + ")");
        return {history_clause(record) + " Will the user like " + record.candidate_item + "? Answer:",
                *record.preference ? "Yes." : "No."};
    }
    if (template_id == kNextItemTemplate) {
        return {history_clause(record) + " Which item will the user choose next? Answer:",
                record.candidate_item + "."};
    }
    throw InputError("render_sample: unknown template '" + std::string(template_id) + "'");
}

std::string full_text(const Sample& s) { return s.text + " " + s.target_text; }

void write_jsonl(const std::vector<Sample>& samples, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    for (const auto& s : samples) {
        const nlohmann::ordered_json j = {{"text", s.text},
                                          {"target_text", s.target_text},
                                          {"membership", to_string(s.membership)},
                                          {"split", to_string(s.split)}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

std::vector<Sample> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<Sample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
        try {
            const auto j = nlohmann::json::parse(line);
            if (!j.is_object()) throw FormatError("expected a JSON object");
            for (const char* key : {"text", "target_text", "membership", "split"})
                if (!j.contains(key)) throw FormatError(std::string("missing field \"") + key + "\"");
            Sample s;
            s.text = j.at("text").get<std::string>();
            s.target_text = j.at("target_text").get<std::string>();
            s.membership = membership_from_string(j.at("membership").get<std::string>());
            s.split = split_from_string(j.at("split").get<std::string>());
            if (s.text.empty()) throw FormatError("empty text");
            if (!consistent(s)) throw FormatError("split contradicts membership");
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(where + e.what());
        } catch (const FormatError& e) {
            throw FormatError(where + e.what());
        }
    }
    return out;
}

}  // namespace mialab::corpus
