#pragma once

// Dataset-level analyses built from the per-example modules: mean flow
// profiles, the stage × tier attention-cut heatmap, logit-lens trajectories
// and deactivation studies.

#include <optional>
#include <string>
#include <vector>

#include "raglab/flow.h"
#include "raglab/harness.h"
#include "raglab/interventions.h"
#include "raglab/kape.h"

namespace raglab {

// provenance: "all" or a split name; limit 0 keeps everything.
std::vector<QaExample> select_examples(const std::vector<QaExample>& data,
                                       std::string_view provenance, std::size_t limit);

struct DatasetFlow {
  FlowProfile profile;
  std::size_t used = 0;
  std::size_t skipped = 0;  // tier missing, key not located or a span empty
};

// Saliency uses the tier's passage key, teacher forced, as the reference answer.
DatasetFlow dataset_flow(const ModelWeights& weights, const Tokenizer& tok,
                         const std::vector<QaExample>& data, Tier tier,
                         const PromptSettings& settings, const FlowSettings& flow);

struct HeatCell {
  Stage stage = Stage::refinement;
  Tier tier = Tier::positive;
  double d_external = 0;  // answer = the passage key
  double d_internal = 0;  // answer = the gold answer
  std::size_t n = 0;
};

struct Heatmap {
  StageSegmentation segmentation;
  ProbMode mode = ProbMode::geometric_mean;
  std::vector<Tier> tiers;
  std::vector<HeatCell> cells;  // stage-major, then tier in the given order
  std::size_t skipped = 0;

  const HeatCell& cell(Stage s, Tier t) const;
};

Heatmap stage_heatmap(const ModelWeights& weights, const Tokenizer& tok,
                      const std::vector<QaExample>& data, const std::vector<Tier>& tiers,
                      const StageSegmentation& segmentation, ProbMode mode,
                      const PromptSettings& settings);

struct LensRow {
  std::size_t layer = 0;
  LensSource source = LensSource::post_mha;
  double internal_logit = 0;
  double external_logit = 0;
  double internal_wins = 0;  // fraction of examples with internal > external
};

struct LensReport {
  Tier tier = Tier::fake;
  std::size_t n = 0;
  std::size_t skipped = 0;
  std::vector<LensRow> rows;  // layer-major, post_mha before post_mlp
};

// Internal answer = gold, external answer = the tier's passage key. Both are
// read at the first token where they differ, teacher forcing the common
// prefix after the prompt.
LensReport logit_lens_report(const ModelWeights& weights, const Tokenizer& tok,
                             const std::vector<QaExample>& data, Tier tier,
                             const PromptSettings& settings);

struct DeactivationStudy {
  std::vector<EvalResult> results;  // per setting: normal, deactivate_ek, deactivate_ik
};

DeactivationStudy deactivation_study(const ModelWeights& weights, const Tokenizer& tok,
                                     const std::vector<QaExample>& data,
                                     const KnowledgeNeurons& neurons,
                                     const std::vector<DocumentSetting>& settings,
                                     Tier noisy_tier, const PromptSettings& prompts);

// Two-sided exact sign test on discordant pair counts.
double sign_test_p(std::size_t plus, std::size_t minus);

struct PairedChange {
  std::size_t up = 0;    // false -> true
  std::size_t down = 0;  // true -> false
  double p_value = 1;
};

// Per-example change of follows_passage between two runs over the same examples.
PairedChange follow_change(const EvalResult& before, const EvalResult& after);

}  // namespace raglab
