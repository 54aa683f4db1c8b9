#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mialab/nn/model.hpp"

namespace mialab::corpus {

using nn::TokenId;

/// Splits text into word-level pieces: runs of word characters or single
/// punctuation marks, each absorbing one preceding space, plus leftover
/// whitespace runs. Concatenating the pieces gives back the text.
std::vector<std::string> pretokenize(std::string_view text);

class Tokenizer {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kUnk = 1;
    static constexpr TokenId kEos = 2;

    Tokenizer() = default;
    explicit Tokenizer(std::vector<std::string> vocabulary);

    std::size_t size() const { return vocab_.size(); }
    const std::vector<std::string>& vocabulary() const { return vocab_; }

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(const std::vector<TokenId>& ids) const;

    /// encode(text) followed by the end-of-text id.
    std::vector<TokenId> encode_with_eos(std::string_view text) const;

    bool contains(std::string_view piece) const { return index_.count(std::string(piece)) != 0; }

    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);

    bool operator==(const Tokenizer& other) const { return vocab_ == other.vocab_; }

private:
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, TokenId> index_;
};

/// Specials first, then pieces by descending frequency (ties broken
/// lexicographically), cut at vocab_size. Pieces that do not fit map to <unk>.
Tokenizer build_tokenizer(const std::vector<std::string>& corpus, std::size_t vocab_size);

}  // namespace mialab::corpus
