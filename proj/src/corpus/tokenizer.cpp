#include "mialab/corpus/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "mialab/common/error.hpp"

namespace mialab::corpus {

namespace {

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

// Bytes >= 0x80 count as word characters so UTF-8 words stay whole.
bool is_word(unsigned char c) {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c >= 0x80;
}

const std::vector<std::string> kSpecials = {"<pad>", "<unk>", "<eos>"};

}  // namespace

std::vector<std::string> pretokenize(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    auto at = [&](std::size_t k) { return static_cast<unsigned char>(text[k]); };
    while (i < n) {
        const std::size_t start = i;
        if (is_space(at(i))) {
            std::size_t j = i;
            while (j < n && is_space(at(j))) ++j;
            // leave a single trailing ' ' for the following piece to absorb
            if (j < n && at(j - 1) == ' ' && j - 1 > i) {
                out.emplace_back(text.substr(i, j - 1 - i));
                i = j - 1;
                continue;
            }
            if (j < n && at(j - 1) == ' ') {
                ++i;  // lone space: absorbed below
            } else {
                out.emplace_back(text.substr(i, j - i));
                i = j;
                continue;
            }
        }
        if (is_word(at(i))) {
            while (i < n && is_word(at(i))) ++i;
        } else {
            ++i;
        }
        out.emplace_back(text.substr(start, i - start));
    }
    return out;
}

Tokenizer::Tokenizer(std::vector<std::string> vocabulary) : vocab_(std::move(vocabulary)) {
    if (vocab_.size() < kSpecials.size() ||
        !std::equal(kSpecials.begin(), kSpecials.end(), vocab_.begin()))
        throw FormatError("tokenizer vocabulary must start with <pad>, <unk>, <eos>");
    for (std::size_t i = 0; i < vocab_.size(); ++i)
        if (!index_.emplace(vocab_[i], static_cast<TokenId>(i)).second)
            throw FormatError("duplicate vocabulary entry '" + vocab_[i] + "'");
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& piece : pretokenize(text)) {
        const auto it = index_.find(piece);
        ids.push_back(it == index_.end() ? kUnk : it->second);
    }
    return ids;
}

std::vector<TokenId> Tokenizer::encode_with_eos(std::string_view text) const {
    auto ids = encode(text);
    ids.push_back(kEos);
    return ids;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (auto id : ids) {
        if (id >= vocab_.size()) throw InputError("decode: token id " + std::to_string(id) + " out of range");
        if (id == kPad || id == kEos) continue;
        out += vocab_[id];
    }
    return out;
}

void Tokenizer::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << nlohmann::json{{"vocabulary", vocab_}}.dump() << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return Tokenizer(nlohmann::json::parse(in).at("vocabulary").get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

Tokenizer build_tokenizer(const std::vector<std::string>& corpus, std::size_t vocab_size) {
    if (corpus.empty()) throw InputError("build_tokenizer: empty corpus");
    if (vocab_size < 16) throw InputError("build_tokenizer: vocab_size must be >= 16");
    std::map<std::string, std::size_t> counts;
    for (const auto& text : corpus)
        for (auto& piece : pretokenize(text)) ++counts[piece];
    for (const auto& s : kSpecials) counts.erase(s);

    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> vocab = kSpecials;
    for (auto& [piece, count] : ranked) {
        if (vocab.size() >= vocab_size) break;
        vocab.push_back(piece);
    }
    return Tokenizer(std::move(vocab));
}

}  // namespace mialab::corpus
