#pragma once

// Closed-book and RAG prompt assembly plus segmentation into the context (C),
// key (K), query (Q) and answer-prompt (A) token sets.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "raglab/tokenizer.h"

namespace raglab {

inline constexpr std::string_view kDefaultAnswerPrompt = "answer :";

// UTF-8 instruction text with named placeholders {passages}, {question} and
// {answer_prompt}. Text outside the placeholders belongs to no span.
struct PromptTemplate {
  std::string text;

  static PromptTemplate rag_default();
  static PromptTemplate closed_book_default();
  static PromptTemplate load(const std::filesystem::path& path);

  struct Segment {
    enum class Kind { literal, passages, question, answer_prompt } kind;
    std::string literal;
  };
  // Throws ConfigError unless {question} and {answer_prompt} appear exactly
  // once, {answer_prompt} is the final segment, and {passages} appears exactly
  // once (RAG) or not at all (closed book).
  std::vector<Segment> parse(bool rag) const;
};

struct RagInstruction {
  PromptTemplate prompt_template = PromptTemplate::rag_default();
  std::vector<std::string> passages;
  std::string question;
  std::string answer_prompt = std::string(kDefaultAnswerPrompt);
  std::optional<std::string> key;
};

enum class SpanRole { context, key, query, answer };

std::string_view to_string(SpanRole role);
SpanRole parse_span_role(std::string_view name);

// Sorted token-index sets. Context excludes the key unless assembly was asked
// to keep it.
struct SpanMap {
  std::vector<std::size_t> context;
  std::vector<std::size_t> key;
  std::vector<std::size_t> query;
  std::vector<std::size_t> answer;
  std::size_t prompt_length = 0;
  // Half-open token ranges of each passage, in order.
  std::vector<std::pair<std::size_t, std::size_t>> passage_ranges;

  const std::vector<std::size_t>& indices(SpanRole role) const;
  // Every passage token, key included.
  std::vector<std::size_t> passage_tokens() const;
};

struct AssemblyOptions {
  bool include_key_in_context = false;
  bool all_key_occurrences = false;
};

struct AssembledPrompt {
  std::vector<TokenId> tokens;
  SpanMap spans;
  std::string text;  // the rendered instruction
  bool key_found = false;
};

AssembledPrompt assemble_closed_book(const Tokenizer& tokenizer, const PromptTemplate& tmpl,
                                     std::string_view question, std::string_view answer_prompt);

// Throws ContractError when no passage is given.
AssembledPrompt assemble_rag(const Tokenizer& tokenizer, const RagInstruction& instruction,
                             const AssemblyOptions& options = {});

// Lowercase, punctuation to spaces, whitespace collapsed and trimmed.
std::string normalize_for_match(std::string_view text);

// Token positions of the first occurrence of `key` inside `context_span`,
// compared after normalize_for_match and trimmed of punctuation-only tokens at
// both ends. With all_occurrences, the union of every non-overlapping match.
// Returns nullopt when the key does not occur.
std::optional<std::vector<std::size_t>> locate_key(const Tokenizer& tokenizer,
                                                   std::span<const TokenId> tokens,
                                                   std::span<const std::size_t> context_span,
                                                   std::string_view key,
                                                   bool all_occurrences = false);

}  // namespace raglab
