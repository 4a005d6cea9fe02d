#pragma once

// Knowledge-activation-probability entropy: per-neuron activation rates under
// closed-book (internal) and gold-passage (external) prompting, their binary
// entropy, and selection of knowledge-specific neurons.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "raglab/harness.h"
#include "raglab/model.h"

namespace raglab {

enum class KnowledgeSetting { closed_book_ik, rag_gold_ek };
std::string_view to_string(KnowledgeSetting s);

// answer_span: positions predicting the reference answer (teacher forced).
// generated: positions predicting the model's own greedy answer.
// all: every prompt position plus the answer-predicting ones.
enum class PositionMode { answer_span, all, generated };
std::string_view to_string(PositionMode m);
PositionMode parse_position_mode(std::string_view name);

// Per-neuron counts of gate activations strictly above zero.
struct ActivationCounts {
  std::size_t n_layers = 0;
  std::size_t d_ff = 0;
  std::vector<std::uint64_t> active;  // n_layers × d_ff
  std::uint64_t positions = 0;
  std::size_t skipped_examples = 0;

  double probability(std::size_t layer, std::size_t neuron) const;
  std::vector<double> probabilities() const;
  // Sums counts; shapes must agree.
  void merge(const ActivationCounts& other);
};

// Adds one gate-activation matrix (positions × d_ff per layer) restricted to
// the given rows.
void accumulate_activations(ActivationCounts& counts, const ForwardTrace& trace,
                            std::span<const std::size_t> rows);

// Throws ContractError for an empty dataset, or when the EK setting meets an
// example without a positive passage.
ActivationCounts activation_probability(const ModelWeights& weights, const Tokenizer& tok,
                                        const std::vector<QaExample>& data,
                                        KnowledgeSetting setting, PositionMode positions,
                                        const PromptSettings& settings);

struct NormalizedPair {
  double p_ik = 0.5;
  double p_ek = 0.5;
  bool defined = false;
};

NormalizedPair normalize_pair(double raw_ik, double raw_ek);
// Binary entropy in nats with 0·log 0 = 0.
double kape_score(double p_ik, double p_ek);

enum class NeuronClass { none, ik, ek };
std::string_view to_string(NeuronClass c);

struct KapeRow {
  NeuronId id;
  double raw_ik = 0;
  double raw_ek = 0;
  NormalizedPair pair;
  double kape = 0;
  NeuronClass cls = NeuronClass::none;
};

struct KapeTable {
  std::size_t n_layers = 0;
  std::size_t d_ff = 0;
  std::vector<KapeRow> rows;  // layer-major
};

KapeTable build_kape_table(const ActivationCounts& ik, const ActivationCounts& ek);
KapeTable build_kape_table(std::size_t n_layers, std::size_t d_ff,
                           std::span<const double> raw_ik, std::span<const double> raw_ek);

struct KnowledgeNeurons {
  DeactivationSet ik;
  DeactivationSet ek;
  std::size_t candidates = 0;  // pre-threshold count, ⌈fraction · N⌉
  double fraction = 0;
  double min_raw = 0;
};

// Lowest-KAPE ⌈fraction·N⌉ neurons (ties by layer then neuron), dropping those
// whose larger raw rate is below min_raw, labeled by the larger raw rate
// (exact ties dropped). Marks the classes in the table.
KnowledgeNeurons select_knowledge_neurons(KapeTable& table, double fraction = 0.01,
                                          double min_raw = 0.2);

void write_kape_csv(const KapeTable& table, const std::filesystem::path& path,
                    const std::vector<std::string>& header_comments = {});
nlohmann::json kape_summary_json(const KapeTable& table, const KnowledgeNeurons& selection);

}  // namespace raglab
