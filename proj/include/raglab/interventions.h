#pragma once

// Stage-wise attention cuts with the probability-delta measurement, and
// knowledge-neuron deactivation runs.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raglab/flow.h"
#include "raglab/harness.h"
#include "raglab/model.h"
#include "raglab/prompt.h"

namespace raglab {

// -inf at (row in target span, column in source span) for each listed layer.
// Throws EmptySpanError when either span is empty.
AdditiveMask build_attention_cut(const SpanMap& spans, std::span<const std::size_t> layers,
                                 std::size_t seq_len, SpanRole source = SpanRole::key,
                                 SpanRole target = SpanRole::query);

enum class ProbMode { geometric_mean, joint };
std::string_view to_string(ProbMode m);
ProbMode parse_prob_mode(std::string_view name);

double sequence_probability(const SequenceProb& p, ProbMode mode);

struct ProbDelta {
  double unmasked = 0;
  double masked = 0;
  double d = 0;  // unmasked - masked
};

// d = P(answer | prompt) − P(answer | prompt, cut on `layers`). An empty layer
// list gives d = 0 exactly. Throws ContractError when the answer is empty.
ProbDelta prob_delta(const ModelWeights& weights, const AssembledPrompt& prompt,
                     std::span<const TokenId> answer, std::span<const std::size_t> layers,
                     ProbMode mode = ProbMode::geometric_mean,
                     SpanRole source = SpanRole::key, SpanRole target = SpanRole::query);

// One delta per stage, sharing the unmasked forward.
std::array<ProbDelta, 4> stage_deltas(const ModelWeights& weights, const AssembledPrompt& prompt,
                                      std::span<const TokenId> answer,
                                      const StageSegmentation& segmentation,
                                      ProbMode mode = ProbMode::geometric_mean);

enum class InterventionKind { attention_cut, neuron_deactivate };

struct InterventionSpec {
  InterventionKind kind = InterventionKind::attention_cut;
  std::vector<std::size_t> layers;  // explicit layers, used when no stage is named
  std::optional<Stage> stage;
  SpanRole source = SpanRole::key;
  SpanRole target = SpanRole::query;
  DeactivationSet neurons;

  // Explicit layers, or the stage's layers under the segmentation.
  std::vector<std::size_t> resolve_layers(const StageSegmentation& segmentation) const;
  // Throws ConfigError on out-of-range layers/neurons or a mixed payload.
  void validate(const ModelConfig& config) const;
};

nlohmann::json intervention_to_json(const InterventionSpec& spec);
InterventionSpec intervention_from_json(const nlohmann::json& j);

// Greedy evaluation with neurons switched off. Noisy documents use
// `options.noisy_tier` (fake by default).
EvalResult evaluate_with_deactivation(const ModelWeights& weights, const Tokenizer& tok,
                                      const std::vector<QaExample>& data,
                                      const DeactivationSet& deactivations,
                                      DocumentSetting setting, const PromptSettings& settings,
                                      Tier noisy_tier = Tier::fake,
                                      const std::string& label = "deactivate");

// Copy of the weights with W_down rows of the listed neurons zeroed.
ModelWeights zero_down_rows(const ModelWeights& weights, const DeactivationSet& neurons);

}  // namespace raglab
