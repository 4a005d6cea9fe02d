#pragma once

// Word-level tokenizer: whitespace separates, runs of letters/digits form
// words, every other ASCII character is its own token. Strings missing from
// the vocabulary fall back to one token per byte.

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "raglab/model.h"

namespace raglab {

struct TokenPiece {
  TokenId id = 0;
  std::size_t begin = 0;  // byte offsets into the encoded text
  std::size_t end = 0;
};

class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kFirstByte = 2;
  static constexpr TokenId kFirstWord = kFirstByte + 256;

  // Vocabulary = specials + 256 byte tokens + sorted unique words of the corpus.
  static Tokenizer build(std::span<const std::string> corpus);
  // `vocab` must begin with the special and byte tokens in canonical order.
  explicit Tokenizer(std::vector<std::string> vocab);
  Tokenizer();

  std::vector<TokenId> encode(std::string_view text) const;
  std::vector<TokenPiece> encode_with_offsets(std::string_view text) const;
  // Words joined by single spaces; consecutive byte tokens are concatenated.
  std::string decode(std::span<const TokenId> ids, bool skip_special = true) const;

  std::size_t size() const { return vocab_.size(); }
  const std::string& token_text(TokenId id) const;
  bool is_byte(TokenId id) const { return id >= kFirstByte && id < kFirstWord; }
  bool contains_word(std::string_view word) const;
  const std::vector<std::string>& vocab() const { return vocab_; }

  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

  // Splits text into word/punctuation units with byte offsets.
  static std::vector<std::pair<std::size_t, std::size_t>> split_units(std::string_view text);

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace raglab
