#pragma once

// Next-token training of the toy model on rendered fact-world sequences.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "raglab/harness.h"
#include "raglab/model.h"
#include "raglab/tokenizer.h"
#include "raglab/world.h"

namespace raglab {

// tokens[i + 1] is a training target wherever loss_mask[i] is set.
struct TrainSample {
  std::vector<TokenId> tokens;
  std::vector<bool> loss_mask;  // length tokens.size() - 1
};

// Prompt followed by answer and eos; only the answer and eos are targets.
TrainSample make_answer_sample(std::span<const TokenId> prompt, std::span<const TokenId> answer);
// Every next token of the text is a target.
TrainSample make_text_sample(const Tokenizer& tok, std::string_view text);

// Training mixture drawn only from train and context facts:
//   train facts:   closed-book QA, RAG with the gold passage, RAG with an
//                  unrelated passage (answered from memory);
//   context facts: RAG with the gold passage alone and next to an unrelated one.
// Holdout facts are never rendered.
std::vector<TrainSample> build_training_samples(const FactWorld& world, const Tokenizer& tok,
                                                const PromptSettings& settings,
                                                std::uint64_t seed);

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 32;
  double learning_rate = 3e-3;
  double min_lr_fraction = 0.05;
  std::size_t warmup = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  std::uint64_t seed = 1;
};

struct TrainResult {
  std::vector<double> losses;  // one per step
};

using TrainProgress = std::function<void(std::size_t step, double loss)>;

// Adam with linear warmup and cosine decay. Deterministic under the seed.
// Throws TrainingError with the step index when the loss is not finite.
TrainResult train(ModelWeights& weights, const std::vector<TrainSample>& samples,
                  const TrainConfig& config, const TrainProgress& progress = {});

// Mean loss over the samples' masked targets without updating weights.
double evaluate_loss(const ModelWeights& weights, const std::vector<TrainSample>& samples);

void write_loss_curve(const std::vector<double>& losses, const std::filesystem::path& path);

}  // namespace raglab
