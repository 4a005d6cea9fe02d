#include "raglab/tokenizer.h"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>

#include "raglab/error.h"

namespace raglab {

namespace {

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }
bool is_word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80 || c == '_'; }

std::vector<std::string> base_vocab() {
  std::vector<std::string> v = {"<pad>", "<eos>"};
  for (int b = 0; b < 256; ++b) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "<0x%02X>", b);
    v.emplace_back(buf);
  }
  return v;
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> Tokenizer::split_units(std::string_view text) {
  std::vector<std::pair<std::size_t, std::size_t>> units;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
    } else if (is_word_char(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_char(static_cast<unsigned char>(text[j]))) ++j;
      units.emplace_back(i, j);
      i = j;
    } else {
      units.emplace_back(i, i + 1);
      ++i;
    }
  }
  return units;
}

Tokenizer::Tokenizer() : Tokenizer(base_vocab()) {}

Tokenizer::Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
  const auto base = base_vocab();
  if (vocab_.size() < base.size() || !std::equal(base.begin(), base.end(), vocab_.begin())) {
    throw FormatError("vocabulary does not start with the special and byte tokens");
  }
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (i >= base.size() && !index_.emplace(vocab_[i], static_cast<TokenId>(i)).second) {
      throw FormatError("duplicate vocabulary entry '" + vocab_[i] + "'");
    }
  }
}

Tokenizer Tokenizer::build(std::span<const std::string> corpus) {
  std::set<std::string> words;
  for (const auto& text : corpus) {
    for (auto [b, e] : split_units(text)) words.emplace(text.substr(b, e - b));
  }
  auto vocab = base_vocab();
  vocab.insert(vocab.end(), words.begin(), words.end());
  return Tokenizer(std::move(vocab));
}

std::vector<TokenPiece> Tokenizer::encode_with_offsets(std::string_view text) const {
  std::vector<TokenPiece> out;
  bool last_was_fallback = false;
  for (auto [b, e] : split_units(text)) {
    auto it = index_.find(std::string(text.substr(b, e - b)));
    if (it != index_.end()) {
      out.push_back({it->second, b, e});
      last_was_fallback = false;
      continue;
    }
    // Adjacent fallback units would merge on decode; separate them with a space byte.
    if (last_was_fallback && b > 0 && is_space(static_cast<unsigned char>(text[b - 1]))) {
      out.push_back({kFirstByte + ' ', b, b});
    }
    for (std::size_t k = b; k < e; ++k) {
      out.push_back({static_cast<TokenId>(kFirstByte + static_cast<unsigned char>(text[k])), k, k + 1});
    }
    last_was_fallback = true;
  }
  return out;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& p : encode_with_offsets(text)) ids.push_back(p.id);
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids, bool skip_special) const {
  std::string out;
  bool in_bytes = false;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
      throw RangeError("token id " + std::to_string(id) + " outside vocabulary");
    }
    if (id < kFirstByte && skip_special) continue;
    if (is_byte(id)) {
      if (!in_bytes && !out.empty()) out.push_back(' ');
      out.push_back(static_cast<char>(id - kFirstByte));
      in_bytes = true;
      continue;
    }
    if (!out.empty()) out.push_back(' ');
    out += vocab_[id];
    in_bytes = false;
  }
  return out;
}

const std::string& Tokenizer::token_text(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw RangeError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return vocab_[id];
}

bool Tokenizer::contains_word(std::string_view word) const {
  return index_.contains(std::string(word));
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (std::size_t i = kFirstWord; i < vocab_.size(); ++i) out << vocab_[i] << '\n';
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocabulary file '" + path.string() + "'");
  auto vocab = base_vocab();
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) vocab.push_back(line);
  }
  return Tokenizer(std::move(vocab));
}

}  // namespace raglab
