#include "raglab/prompt.h"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "raglab/error.h"

namespace raglab {

PromptTemplate PromptTemplate::rag_default() {
  return {"context : {passages} question : {question} {answer_prompt}"};
}

PromptTemplate PromptTemplate::closed_book_default() { return {"question : {question} {answer_prompt}"}; }

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open template '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  return {text};
}

std::vector<PromptTemplate::Segment> PromptTemplate::parse(bool rag) const {
  using Kind = Segment::Kind;
  std::vector<Segment> segs;
  int n_passages = 0, n_question = 0, n_answer = 0;
  std::size_t pos = 0;
  std::string literal;
  while (pos < text.size()) {
    if (text[pos] == '{') {
      const auto close = text.find('}', pos);
      if (close == std::string::npos) throw ConfigError("template: unterminated placeholder");
      const std::string name = text.substr(pos + 1, close - pos - 1);
      Kind kind;
      if (name == "passages") {
        kind = Kind::passages;
        ++n_passages;
      } else if (name == "question") {
        kind = Kind::question;
        ++n_question;
      } else if (name == "answer_prompt") {
        kind = Kind::answer_prompt;
        ++n_answer;
      } else {
        throw ConfigError("template: unknown placeholder {" + name + "}");
      }
      if (!literal.empty()) segs.push_back({Kind::literal, std::move(literal)});
      literal.clear();
      segs.push_back({kind, {}});
      pos = close + 1;
    } else {
      literal.push_back(text[pos++]);
    }
  }
  if (!literal.empty()) segs.push_back({Kind::literal, literal});
  if (n_question != 1 || n_answer != 1) {
    throw ConfigError("template must contain {question} and {answer_prompt} exactly once");
  }
  if (rag && n_passages != 1) throw ConfigError("RAG template must contain {passages} exactly once");
  if (!rag && n_passages != 0) throw ConfigError("closed-book template must not contain {passages}");
  const bool answer_last =
      segs.back().kind == Kind::answer_prompt ||
      (segs.size() >= 2 && segs[segs.size() - 2].kind == Kind::answer_prompt &&
       normalize_for_match(segs.back().literal).empty() &&
       std::all_of(segs.back().literal.begin(), segs.back().literal.end(),
                   [](unsigned char c) { return std::isspace(c); }));
  if (!answer_last) throw ConfigError("template: {answer_prompt} must be the final segment");
  return segs;
}

std::string_view to_string(SpanRole role) {
  switch (role) {
    case SpanRole::context: return "context";
    case SpanRole::key: return "key";
    case SpanRole::query: return "query";
    case SpanRole::answer: return "answer";
  }
  return "?";
}

SpanRole parse_span_role(std::string_view name) {
  if (name == "context") return SpanRole::context;
  if (name == "key") return SpanRole::key;
  if (name == "query") return SpanRole::query;
  if (name == "answer") return SpanRole::answer;
  throw ConfigError("unknown span role '" + std::string(name) + "'");
}

const std::vector<std::size_t>& SpanMap::indices(SpanRole role) const {
  switch (role) {
    case SpanRole::context: return context;
    case SpanRole::key: return key;
    case SpanRole::query: return query;
    case SpanRole::answer: return answer;
  }
  return context;
}

std::vector<std::size_t> SpanMap::passage_tokens() const {
  std::vector<std::size_t> out;
  for (auto [b, e] : passage_ranges) {
    for (std::size_t i = b; i < e; ++i) out.push_back(i);
  }
  return out;
}

std::string normalize_for_match(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(std::tolower(c)));
    } else {
      pending_space = true;
    }
  }
  return out;
}

namespace {

struct Builder {
  const Tokenizer& tok;
  AssembledPrompt result;

  std::pair<std::size_t, std::size_t> append(std::string_view piece) {
    const std::size_t begin = result.tokens.size();
    const auto ids = tok.encode(piece);
    result.tokens.insert(result.tokens.end(), ids.begin(), ids.end());
    result.text += piece;
    return {begin, result.tokens.size()};
  }
};

void push_range(std::vector<std::size_t>& out, std::pair<std::size_t, std::size_t> r) {
  for (std::size_t i = r.first; i < r.second; ++i) out.push_back(i);
}

AssembledPrompt assemble(const Tokenizer& tokenizer, const PromptTemplate& tmpl, bool rag,
                         std::span<const std::string> passages, std::string_view question,
                         std::string_view answer_prompt) {
  using Kind = PromptTemplate::Segment::Kind;
  Builder b{tokenizer, {}};
  for (const auto& seg : tmpl.parse(rag)) {
    switch (seg.kind) {
      case Kind::literal:
        b.append(seg.literal);
        break;
      case Kind::passages:
        for (std::size_t i = 0; i < passages.size(); ++i) {
          if (i > 0) b.append(" ");
          const auto r = b.append(passages[i]);
          b.result.spans.passage_ranges.push_back(r);
        }
        break;
      case Kind::question:
        push_range(b.result.spans.query, b.append(question));
        break;
      case Kind::answer_prompt:
        push_range(b.result.spans.answer, b.append(answer_prompt));
        break;
    }
  }
  b.result.spans.prompt_length = b.result.tokens.size();
  b.result.spans.context = b.result.spans.passage_tokens();
  return std::move(b.result);
}

}  // namespace

AssembledPrompt assemble_closed_book(const Tokenizer& tokenizer, const PromptTemplate& tmpl,
                                     std::string_view question, std::string_view answer_prompt) {
  return assemble(tokenizer, tmpl, false, {}, question, answer_prompt);
}

AssembledPrompt assemble_rag(const Tokenizer& tokenizer, const RagInstruction& instruction,
                             const AssemblyOptions& options) {
  if (instruction.passages.empty()) throw ContractError("assemble_rag: at least one passage required");
  AssembledPrompt p = assemble(tokenizer, instruction.prompt_template, true, instruction.passages,
                               instruction.question, instruction.answer_prompt);
  if (instruction.key && !instruction.key->empty()) {
    const auto found = locate_key(tokenizer, p.tokens, p.spans.context, *instruction.key,
                                  options.all_key_occurrences);
    if (found) {
      p.key_found = true;
      p.spans.key = *found;
      if (!options.include_key_in_context) {
        std::vector<std::size_t> rest;
        std::set_difference(p.spans.context.begin(), p.spans.context.end(), found->begin(),
                            found->end(), std::back_inserter(rest));
        p.spans.context = std::move(rest);
      }
    }
  }
  return p;
}

std::optional<std::vector<std::size_t>> locate_key(const Tokenizer& tokenizer,
                                                   std::span<const TokenId> tokens,
                                                   std::span<const std::size_t> context_span,
                                                   std::string_view key, bool all_occurrences) {
  const std::string target = normalize_for_match(key);
  if (target.empty()) return std::nullopt;
  std::vector<std::size_t> ctx(context_span.begin(), context_span.end());
  std::sort(ctx.begin(), ctx.end());
  auto inside = [&](std::size_t i) { return std::binary_search(ctx.begin(), ctx.end(), i); };
  auto token_norm = [&](std::size_t i) {
    return normalize_for_match(tokenizer.decode(tokens.subspan(i, 1), false));
  };

  std::vector<std::size_t> hits;
  std::size_t resume = 0;
  for (std::size_t s : ctx) {
    if (s < resume || s >= tokens.size() || token_norm(s).empty()) continue;
    for (std::size_t e = s + 1; e <= tokens.size() && inside(e - 1); ++e) {
      const std::string window = normalize_for_match(tokenizer.decode(tokens.subspan(s, e - s), false));
      if (window.size() > target.size()) break;
      if (window == target && !token_norm(e - 1).empty()) {
        for (std::size_t i = s; i < e; ++i) hits.push_back(i);
        resume = e;
        break;
      }
    }
    if (!hits.empty() && !all_occurrences) break;
  }
  if (hits.empty()) return std::nullopt;
  return hits;
}

}  // namespace raglab
