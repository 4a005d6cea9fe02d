#include <doctest.h>

#include <algorithm>
#include <set>

#include "raglab/error.h"
#include "raglab/prompt.h"
#include "raglab/tokenizer.h"
#include "support.h"

using namespace raglab;

namespace {

Tokenizer test_tokenizer() {
  const std::vector<std::string> corpus = {
      "context : question : answer :", "the capital of new york city is albany .",
      "who founded acme ? where is the river ?", "paris is in france , and new york is big ."};
  return Tokenizer::build(corpus);
}

bool disjoint(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  for (auto x : a) {
    if (std::find(b.begin(), b.end(), x) != b.end()) return false;
  }
  return true;
}

void check_structure(const AssembledPrompt& p) {
  const auto& s = p.spans;
  CHECK(s.prompt_length == p.tokens.size());
  const std::vector<const std::vector<std::size_t>*> all = {&s.context, &s.key, &s.query, &s.answer};
  for (std::size_t i = 0; i < all.size(); ++i) {
    CHECK(std::is_sorted(all[i]->begin(), all[i]->end()));
    for (auto x : *all[i]) CHECK(x < s.prompt_length);
    for (std::size_t j = i + 1; j < all.size(); ++j) CHECK(disjoint(*all[i], *all[j]));
  }
}

std::string decode_span(const Tokenizer& tok, const AssembledPrompt& p, const std::vector<std::size_t>& idx) {
  std::vector<TokenId> ids;
  for (auto i : idx) ids.push_back(p.tokens[i]);
  return tok.decode(ids);
}

// Token indices whose character range lies inside [begin, end) of the full text.
std::vector<std::size_t> tokens_in(const std::vector<TokenPiece>& pieces, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    if (pieces[i].begin >= begin && pieces[i].end <= end && pieces[i].end > pieces[i].begin) out.push_back(i);
  }
  return out;
}

}  // namespace

TEST_CASE("template parsing rules") {
  CHECK_NOTHROW(PromptTemplate::rag_default().parse(true));
  CHECK_NOTHROW(PromptTemplate::closed_book_default().parse(false));
  CHECK_THROWS_AS(PromptTemplate{"{question} {answer_prompt}"}.parse(true), ConfigError);
  CHECK_THROWS_AS(PromptTemplate{"{passages} {answer_prompt} {question}"}.parse(true), ConfigError);
  CHECK_THROWS_AS(PromptTemplate{"{passages} {question} {question} {answer_prompt}"}.parse(true), ConfigError);
  CHECK_THROWS_AS(PromptTemplate{"{passages} {question} {answer_prompt}"}.parse(false), ConfigError);
  CHECK_THROWS_AS(PromptTemplate{"{question} {oops} {answer_prompt}"}.parse(false), ConfigError);
  CHECK_THROWS_AS(PromptTemplate{"{question {answer_prompt}"}.parse(false), ConfigError);
  CHECK_NOTHROW(PromptTemplate{"q: {question} {answer_prompt}  "}.parse(false));
}

TEST_CASE("closed-book assembly") {
  const auto tok = test_tokenizer();
  const auto p = assemble_closed_book(tok, PromptTemplate::closed_book_default(), "who founded acme ?", "answer :");
  check_structure(p);
  CHECK(p.spans.context.empty());
  CHECK(p.spans.key.empty());
  CHECK(normalize_for_match(decode_span(tok, p, p.spans.query)) == "who founded acme");
  CHECK(decode_span(tok, p, p.spans.answer) == "answer :");
  const auto e = assemble_closed_book(tok, PromptTemplate::closed_book_default(), "", "answer :");
  CHECK(e.spans.query.empty());
  check_structure(e);
}

TEST_CASE("RAG assembly spans agree with an offset mapping of the rendered text") {
  const auto tok = test_tokenizer();
  RagInstruction in;
  in.passages = {"the capital of new york city is albany .", "paris is in france ."};
  in.question = "where is the river ?";
  in.key = "albany";
  const auto p = assemble_rag(tok, in);
  check_structure(p);
  REQUIRE(p.key_found);

  const std::string text = "context : " + in.passages[0] + " " + in.passages[1] + " question : " +
                           in.question + " " + in.answer_prompt;
  CHECK(p.text == text);
  const auto pieces = tok.encode_with_offsets(text);
  REQUIRE(pieces.size() == p.tokens.size());
  for (std::size_t i = 0; i < pieces.size(); ++i) CHECK(pieces[i].id == p.tokens[i]);
  const std::size_t p0 = text.find(in.passages[0]);
  const std::size_t p1 = text.find(in.passages[1], p0 + in.passages[0].size());
  auto passage_tokens = tokens_in(pieces, p0, p0 + in.passages[0].size());
  const auto second = tokens_in(pieces, p1, p1 + in.passages[1].size());
  passage_tokens.insert(passage_tokens.end(), second.begin(), second.end());
  CHECK(p.spans.passage_tokens() == passage_tokens);
  const std::size_t q = text.find(in.question, p1);
  CHECK(p.spans.query == tokens_in(pieces, q, q + in.question.size()));
  const std::size_t a = text.rfind(in.answer_prompt);
  CHECK(p.spans.answer == tokens_in(pieces, a, a + in.answer_prompt.size()));
  const std::size_t k = text.find("albany");
  CHECK(p.spans.key == tokens_in(pieces, k, k + 6));
  // Context = passages minus key; the include flag keeps the key.
  std::vector<std::size_t> ctx;
  std::set_difference(passage_tokens.begin(), passage_tokens.end(), p.spans.key.begin(),
                      p.spans.key.end(), std::back_inserter(ctx));
  CHECK(p.spans.context == ctx);
  AssemblyOptions keep;
  keep.include_key_in_context = true;
  CHECK(assemble_rag(tok, in, keep).spans.context == passage_tokens);
  // Deterministic.
  CHECK(assemble_rag(tok, in).tokens == p.tokens);
}

TEST_CASE("RAG degenerate inputs") {
  const auto tok = test_tokenizer();
  RagInstruction in;
  in.question = "who founded acme ?";
  CHECK_THROWS_AS(assemble_rag(tok, in), ContractError);
  in.passages = {"paris"};
  const auto p = assemble_rag(tok, in);
  CHECK(p.spans.context.size() >= 1);
  in.passages = {"paris", "france"};
  const auto two = assemble_rag(tok, in);
  CHECK(two.spans.context == two.spans.passage_tokens());
  CHECK(two.spans.passage_ranges.size() == 2);
}

TEST_CASE("locate_key: whole passage, absent key, multi-token key against brute force") {
  const auto tok = test_tokenizer();
  RagInstruction in;
  in.passages = {"paris is in france"};
  in.question = "who founded acme ?";
  in.key = "Paris is in France";
  auto p = assemble_rag(tok, in);
  CHECK(p.spans.key == p.spans.passage_tokens());
  CHECK(p.spans.context.empty());
  in.key = "albany";
  p = assemble_rag(tok, in);
  CHECK_FALSE(p.key_found);
  CHECK(p.spans.key.empty());

  in.passages = {"paris is in france , and new york is big .", "the capital of new york city is albany ."};
  in.key = "New York City";
  p = assemble_rag(tok, in);
  REQUIRE(p.key_found);
  // Brute force over every window of the passage region.
  const auto region = p.spans.passage_tokens();
  const std::string target = normalize_for_match(*in.key);
  std::vector<std::size_t> best;
  for (std::size_t s = 0; s < region.size() && best.empty(); ++s) {
    for (std::size_t e = s + 1; e <= region.size(); ++e) {
      if (region[e - 1] - region[s] != e - 1 - s) break;
      std::vector<TokenId> w(p.tokens.begin() + region[s], p.tokens.begin() + region[e - 1] + 1);
      const auto first = normalize_for_match(tok.decode(std::span(&w.front(), 1)));
      const auto last = normalize_for_match(tok.decode(std::span(&w.back(), 1)));
      if (!first.empty() && !last.empty() && normalize_for_match(tok.decode(w)) == target) {
        best.assign(region.begin() + s, region.begin() + e);
        break;
      }
    }
  }
  CHECK(best.size() >= 3);
  CHECK(p.spans.key == best);
  CHECK(best.back() - best.front() + 1 == best.size());

  // First occurrence by default, every occurrence with the flag.
  in.passages = {"new york is big .", "new york city is albany ."};
  in.key = "new york";
  p = assemble_rag(tok, in);
  CHECK(p.spans.key.size() == 2);
  AssemblyOptions all;
  all.all_key_occurrences = true;
  CHECK(assemble_rag(tok, in, all).spans.key.size() == 4);
}

TEST_CASE("tokenizer byte fallback round trip and vocabulary file") {
  const auto tok = test_tokenizer();
  const std::string text = "paris zzq France! 42";
  CHECK(normalize_for_match(tok.decode(tok.encode(text))) == normalize_for_match(text));
  raglab::testing::TempDir dir("vocab");
  tok.save(dir.path / "v.txt");
  const auto back = Tokenizer::load(dir.path / "v.txt");
  CHECK(back.vocab() == tok.vocab());
  CHECK_THROWS_AS(tok.decode(std::vector<TokenId>{static_cast<TokenId>(tok.size())}), RangeError);
}
