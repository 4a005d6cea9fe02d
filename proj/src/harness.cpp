#include "raglab/harness.h"

#include "raglab/error.h"
#include "raglab/metrics.h"

namespace raglab {

Tokenizer world_tokenizer(const FactWorld& world, const PromptSettings& settings) {
  std::vector<std::string> corpus = world.all_texts();
  for (const auto* t : {&settings.rag, &settings.closed_book}) {
    for (const auto& seg : t->parse(t == &settings.rag)) {
      if (seg.kind == PromptTemplate::Segment::Kind::literal) corpus.push_back(seg.literal);
    }
  }
  corpus.push_back(settings.answer_prompt);
  return Tokenizer::build(corpus);
}

AssembledPrompt closed_book_prompt(const Tokenizer& tok, const QaExample& ex,
                                   const PromptSettings& settings) {
  return assemble_closed_book(tok, settings.closed_book, ex.question, settings.answer_prompt);
}

AssembledPrompt rag_prompt(const Tokenizer& tok, const QaExample& ex,
                           const std::vector<Tier>& tiers, const PromptSettings& settings) {
  RagInstruction ins;
  ins.prompt_template = settings.rag;
  ins.question = ex.question;
  ins.answer_prompt = settings.answer_prompt;
  for (auto t : tiers) {
    auto it = ex.passages.find(t);
    if (it == ex.passages.end()) {
      throw ContractError("example " + ex.id + " has no " + std::string(to_string(t)) + " passage");
    }
    ins.passages.push_back(it->second);
  }
  if (!tiers.empty()) {
    auto key = ex.passage_keys.find(tiers.front());
    if (key != ex.passage_keys.end()) ins.key = key->second;
  }
  return assemble_rag(tok, ins, settings.assembly);
}

std::vector<TokenId> answer_tokens(const Tokenizer& tok, std::string_view answer) {
  return tok.encode(answer);
}

namespace {

std::string answer_from(const ModelWeights& weights, const Tokenizer& tok,
                        const std::vector<TokenId>& prompt, const PromptSettings& settings,
                        const DeactivationSet* deactivations) {
  GenerateOptions go;
  go.max_new = settings.max_new;
  go.stop_tokens = {Tokenizer::kEos, Tokenizer::kPad};
  go.deactivations = deactivations;
  return tok.decode(generate_greedy(weights, prompt, go));
}

}  // namespace

std::string closed_book_answer(const ModelWeights& weights, const Tokenizer& tok,
                               const QaExample& ex, const PromptSettings& settings,
                               const DeactivationSet* deactivations) {
  return answer_from(weights, tok, closed_book_prompt(tok, ex, settings).tokens, settings,
                     deactivations);
}

std::string rag_answer(const ModelWeights& weights, const Tokenizer& tok, const QaExample& ex,
                       Tier tier, const PromptSettings& settings,
                       const DeactivationSet* deactivations) {
  return answer_from(weights, tok, rag_prompt(tok, ex, {tier}, settings).tokens, settings,
                     deactivations);
}

std::string_view to_string(DocumentSetting s) {
  switch (s) {
    case DocumentSetting::closed_book: return "closed_book";
    case DocumentSetting::gold: return "gold";
    case DocumentSetting::noisy: return "noisy";
  }
  return "?";
}

DocumentSetting parse_document_setting(std::string_view name) {
  if (name == "closed_book" || name == "closed-book") return DocumentSetting::closed_book;
  if (name == "gold") return DocumentSetting::gold;
  if (name == "noisy") return DocumentSetting::noisy;
  throw ConfigError("unknown document setting '" + std::string(name) + "'");
}

EvalResult evaluate(const ModelWeights& weights, const Tokenizer& tok,
                    const std::vector<QaExample>& data, const PromptSettings& settings,
                    const EvalOptions& options) {
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  EvalResult r;
  r.setting = std::string(to_string(options.setting));
  if (options.setting == DocumentSetting::noisy) {
    r.setting += ":" + std::string(to_string(options.noisy_tier));
  }
  r.intervention = options.intervention;
  std::optional<Tier> tier;
  if (options.setting == DocumentSetting::gold) tier = Tier::positive;
  if (options.setting == DocumentSetting::noisy) tier = options.noisy_tier;
  std::size_t followed = 0;
  for (const auto& ex : data) {
    if (tier && !ex.has_tier(*tier)) continue;
    ExampleScore s;
    s.id = ex.id;
    s.prediction = tier ? rag_answer(weights, tok, ex, *tier, settings, options.deactivations)
                        : closed_book_answer(weights, tok, ex, settings, options.deactivations);
    s.em = exact_match(s.prediction, ex.answers);
    s.cem = cover_exact_match(s.prediction, ex.answers);
    s.f1 = token_f1(s.prediction, ex.answers);
    if (tier) {
      auto key = ex.passage_keys.find(*tier);
      if (key != ex.passage_keys.end()) {
        const std::vector<std::string> keys = {key->second};
        s.follows_passage = cover_exact_match(s.prediction, keys);
      }
    }
    r.em += s.em;
    r.cem += s.cem;
    r.f1 += s.f1;
    followed += s.follows_passage;
    r.examples.push_back(std::move(s));
  }
  if (!r.examples.empty()) {
    const double n = static_cast<double>(r.examples.size());
    r.em = 100.0 * r.em / n;
    r.cem = 100.0 * r.cem / n;
    r.f1 = 100.0 * r.f1 / n;
    r.follow_rate = 100.0 * static_cast<double>(followed) / n;
  }
  return r;
}

nlohmann::json eval_to_json(const EvalResult& r, bool per_example) {
  nlohmann::json j = {{"setting", r.setting},
                      {"intervention", r.intervention},
                      {"n", r.examples.size()},
                      {"em", r.em},
                      {"cem", r.cem},
                      {"f1", r.f1},
                      {"follow_rate", r.follow_rate}};
  if (per_example) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& s : r.examples) {
      rows.push_back({{"id", s.id},
                      {"prediction", s.prediction},
                      {"em", s.em},
                      {"cem", s.cem},
                      {"f1", s.f1},
                      {"follows_passage", s.follows_passage}});
    }
    j["examples"] = rows;
  }
  return j;
}

}  // namespace raglab
