#pragma once

// Prompt rendering for QA examples, greedy answering, and EM/CEM/F1
// evaluation under closed-book, gold-passage and noisy-passage settings.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raglab/model.h"
#include "raglab/prompt.h"
#include "raglab/tokenizer.h"
#include "raglab/world.h"

namespace raglab {

struct PromptSettings {
  PromptTemplate rag = PromptTemplate::rag_default();
  PromptTemplate closed_book = PromptTemplate::closed_book_default();
  std::string answer_prompt = std::string(kDefaultAnswerPrompt);
  std::size_t max_new = 8;
  AssemblyOptions assembly;
};

// Vocabulary covering the world's texts and the templates' literal words.
Tokenizer world_tokenizer(const FactWorld& world, const PromptSettings& settings = {});

AssembledPrompt closed_book_prompt(const Tokenizer& tok, const QaExample& ex,
                                   const PromptSettings& settings);
// One passage per tier, in the given order. The key is the first tier's
// passage key when present.
AssembledPrompt rag_prompt(const Tokenizer& tok, const QaExample& ex,
                           const std::vector<Tier>& tiers, const PromptSettings& settings);

// Tokens of an answer string as the model should emit it (without eos).
std::vector<TokenId> answer_tokens(const Tokenizer& tok, std::string_view answer);

std::string closed_book_answer(const ModelWeights& weights, const Tokenizer& tok,
                               const QaExample& ex, const PromptSettings& settings,
                               const DeactivationSet* deactivations = nullptr);
// Throws ContractError when the example lacks the tier.
std::string rag_answer(const ModelWeights& weights, const Tokenizer& tok, const QaExample& ex,
                       Tier tier, const PromptSettings& settings,
                       const DeactivationSet* deactivations = nullptr);

enum class DocumentSetting { closed_book, gold, noisy };
std::string_view to_string(DocumentSetting s);
DocumentSetting parse_document_setting(std::string_view name);

struct ExampleScore {
  std::string id;
  std::string prediction;
  bool em = false;
  bool cem = false;
  double f1 = 0;
  // Prediction contains the passage's own key (the fake answer for fake passages).
  bool follows_passage = false;
};

struct EvalResult {
  std::string setting;       // "closed_book", "gold", "noisy:fake", ...
  std::string intervention;  // "none" or a description of the deactivation
  std::vector<ExampleScore> examples;
  double em = 0;   // percent
  double cem = 0;  // percent
  double f1 = 0;   // percent
  double follow_rate = 0;  // percent of examples following the passage key
};

struct EvalOptions {
  DocumentSetting setting = DocumentSetting::closed_book;
  Tier noisy_tier = Tier::fake;
  const DeactivationSet* deactivations = nullptr;
  std::string intervention = "none";
};

// Examples lacking the needed tier are skipped. Throws ContractError when the
// dataset is empty.
EvalResult evaluate(const ModelWeights& weights, const Tokenizer& tok,
                    const std::vector<QaExample>& data, const PromptSettings& settings,
                    const EvalOptions& options);

nlohmann::json eval_to_json(const EvalResult& r, bool per_example);

}  // namespace raglab
