#pragma once

// Attention and saliency information flow between prompt spans, per layer,
// plus segmentation of the layer stack into four knowledge-streaming stages.

#include <array>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "raglab/model.h"
#include "raglab/prompt.h"

namespace raglab {

// source_first: flow from s to t sums rows in t and columns in s (the
// attending position receives from earlier columns). literal: rows in s,
// columns in t.
enum class FlowConvention { source_first, literal };
// raw sums; mean divides by heads · |rows| · |cols|.
enum class FlowNorm { raw, mean };

std::string_view to_string(FlowConvention c);
std::string_view to_string(FlowNorm n);
FlowConvention parse_flow_convention(std::string_view name);
FlowNorm parse_flow_norm(std::string_view name);

// The three directions tracked per layer, all with the key as source.
enum class FlowDirection { key_context, key_query, key_answer };
inline constexpr FlowDirection kAllDirections[] = {FlowDirection::key_context,
                                                   FlowDirection::key_query,
                                                   FlowDirection::key_answer};
std::string_view to_string(FlowDirection d);  // "kc", "kq", "ka"
SpanRole target_role(FlowDirection d);

// Σ over matrices and over (i in rows, j in cols, i != j) of m(i, j). Each
// matrix is n × n row-major. Throws EmptySpanError on an empty index set.
double flow_sum(std::span<const Tensor> matrices, std::span<const std::size_t> rows,
                std::span<const std::size_t> cols, FlowNorm norm);

// Per-layer flow over every head's attention matrix.
std::vector<double> attention_flow(const ForwardTrace& trace, const SpanMap& spans,
                                   SpanRole source, SpanRole target,
                                   FlowNorm norm = FlowNorm::raw,
                                   FlowConvention convention = FlowConvention::source_first);

struct SaliencyOptions {
  bool transpose = false;  // |G ⊙ Aᵀ| instead of |G ⊙ A|
  Real loss_scale = 1;     // multiplies the loss before backward
};

// Per-layer saliency Σ_h |∇_A L ⊙ A| where L is the mean cross-entropy of the
// teacher-forced reference answer after the prompt. Matrices cover the full
// teacher-forced input (prompt plus all but the last answer token).
std::vector<Tensor> saliency_matrices(const ModelWeights& weights,
                                      std::span<const TokenId> prompt,
                                      std::span<const TokenId> reference_answer,
                                      const SaliencyOptions& options = {});

// Both variants from one backward pass.
struct SaliencyPair {
  std::vector<Tensor> plain;
  std::vector<Tensor> transposed;
};
SaliencyPair saliency_both(const ModelWeights& weights, std::span<const TokenId> prompt,
                           std::span<const TokenId> reference_answer, Real loss_scale = 1);

// Saliency matrices from a trace whose attention tensors carry gradients.
// Throws ContractError when they do not.
std::vector<Tensor> saliency_from_trace(const ForwardTrace& trace, bool transpose);

std::vector<double> saliency_flow(std::span<const Tensor> saliency, const SpanMap& spans,
                                  SpanRole source, SpanRole target,
                                  FlowNorm norm = FlowNorm::raw,
                                  FlowConvention convention = FlowConvention::source_first);

struct FlowProfile {
  FlowConvention convention = FlowConvention::source_first;
  FlowNorm normalization = FlowNorm::raw;
  std::size_t n_layers = 0;
  std::size_t n_examples = 0;
  std::array<std::vector<double>, 3> attention;             // indexed by FlowDirection
  std::array<std::vector<double>, 3> saliency;
  std::array<std::vector<double>, 3> saliency_transposed;

  const std::vector<double>& curve(FlowDirection d, bool saliency_variant) const {
    return saliency_variant ? saliency[static_cast<int>(d)] : attention[static_cast<int>(d)];
  }
};

struct FlowSettings {
  FlowConvention convention = FlowConvention::source_first;
  FlowNorm normalization = FlowNorm::raw;
  bool saliency = true;
};

// Traced forward (plus backward for saliency) on one assembled prompt.
// Requires nonempty key, context, query and answer spans.
FlowProfile flow_profile(const ModelWeights& weights, const AssembledPrompt& prompt,
                         std::span<const TokenId> reference_answer,
                         const FlowSettings& settings = {});

// Per-layer arithmetic mean. Throws ContractError on an empty list or on
// profiles with different layer counts or tags.
FlowProfile mean_profile(std::span<const FlowProfile> profiles);

nlohmann::json profile_to_json(const FlowProfile& profile);
FlowProfile profile_from_json(const nlohmann::json& j);

enum class Stage { refinement, elicitation, expression, contestation };
inline constexpr Stage kAllStages[] = {Stage::refinement, Stage::elicitation, Stage::expression,
                                       Stage::contestation};
std::string_view to_string(Stage s);
Stage parse_stage(std::string_view name);

enum class SegmentMethod { quartile, changepoint };
std::string_view to_string(SegmentMethod m);
SegmentMethod parse_segment_method(std::string_view name);

struct StageSegmentation {
  std::array<std::pair<std::size_t, std::size_t>, 4> ranges;  // half-open, in stage order
  SegmentMethod method = SegmentMethod::quartile;

  std::vector<std::size_t> layers(Stage s) const;
  std::size_t n_layers() const { return ranges[3].second; }
};

// Four contiguous blocks of equal size (±1). Throws RangeError below 4 layers.
StageSegmentation segment_quartile(std::size_t n_layers);

// Exact least-squares fit of a 4-piece constant model. Among equal costs the
// lexicographically smallest boundary triple wins.
StageSegmentation segment_changepoint(std::span<const double> curve);

// Segments on the attention key→query curve.
StageSegmentation segment_stages(const FlowProfile& profile, SegmentMethod method);

// Sum of squared deviations from the segment mean, for [begin, end).
double segment_sse(std::span<const double> curve, std::size_t begin, std::size_t end);

nlohmann::json segmentation_to_json(const StageSegmentation& s);

}  // namespace raglab
