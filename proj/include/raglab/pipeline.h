#pragma once

// End-to-end toy-world run: world → training → evaluation → flow profiles →
// stages → attention-cut heatmap → KAPE → deactivation → logit lens.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raglab/analysis.h"
#include "raglab/report.h"
#include "raglab/train.h"

namespace raglab {

struct PipelineConfig {
  WorldParams world;
  std::uint64_t data_seed = 11;
  ModelConfig model;  // vocab_size is filled from the tokenizer
  std::uint64_t init_seed = 1;
  TrainConfig train;

  std::size_t eval_limit = 400;
  std::vector<Tier> flow_tiers = {Tier::positive, Tier::hard, Tier::hard_minus, Tier::random};
  std::string flow_provenance = "holdout";
  std::size_t flow_limit = 100;
  FlowSettings flow;
  SegmentMethod stage_method = SegmentMethod::quartile;
  ProbMode prob_mode = ProbMode::geometric_mean;
  std::size_t heatmap_limit = 100;
  double kape_fraction = 0.01;
  double kape_min_raw = 0.2;
  PositionMode kape_positions = PositionMode::answer_span;
  std::size_t kape_limit = 400;
  Tier noisy_tier = Tier::fake;
  std::size_t deactivate_limit = 300;
  std::size_t lens_limit = 200;
  PromptSettings prompts;

  nlohmann::json to_json() const;
};

struct PipelineResult {
  FactWorld world;
  Tokenizer tokenizer;
  ModelWeights weights;
  std::vector<double> losses;
  std::vector<QaExample> dataset;
  EvalResult closed_book_train;
  EvalResult closed_book_holdout;
  EvalResult gold_holdout;
  std::vector<std::pair<Tier, DatasetFlow>> flows;
  StageSegmentation segmentation;
  Heatmap heatmap;
  KapeTable kape;
  KnowledgeNeurons neurons;
  DeactivationStudy deactivation;
  LensReport lens;
};

using PipelineLog = std::function<void(const std::string&)>;

// Runs every stage; when `out` is given, writes each report as it completes.
PipelineResult run_pipeline(const PipelineConfig& config, OutputSet* out,
                            const ReportContext& ctx, const PipelineLog& log = {});

// Analyses only, on an already trained model (everything after training).
void run_analyses(PipelineResult& r, const PipelineConfig& config, OutputSet* out,
                  const ReportContext& ctx, const PipelineLog& log = {});

}  // namespace raglab
