#pragma once

// Decoder-only pre-norm transformer with GLU MLPs, full trace capture,
// intervention hooks and logit-lens decoding.

#include <compare>
#include <limits>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "raglab/tensor.h"

namespace raglab {

using TokenId = std::int32_t;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t vocab_size = 0;
  std::size_t max_seq = 128;
  Activation activation = Activation::silu;
  bool tie_embeddings = false;
  double layernorm_eps = 1e-5;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t neuron_count() const { return n_layers * d_ff; }
  // Throws ConfigError.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Tensor attn_norm_gain, attn_norm_bias;
  Tensor wq, wk, wv, wo;  // d_model × d_model, applied as x·W
  Tensor mlp_norm_gain, mlp_norm_bias;
  Tensor w_gate, w_up;  // d_model × d_ff
  Tensor w_down;        // d_ff × d_model
};

struct ModelWeights {
  ModelConfig config;
  Tensor token_embedding;     // vocab × d_model
  Tensor position_embedding;  // max_seq × d_model
  std::vector<LayerWeights> layers;
  Tensor final_norm_gain, final_norm_bias;
  Tensor unembedding;  // vocab × d_model; shares the token embedding when tied

  // Stable name → tensor listing used by serialization and the optimizer.
  // A tied unembedding is not listed separately.
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;

  // Deep copy that preserves embedding tying.
  ModelWeights clone() const;
  void set_requires_grad(bool value);
  // Throws ConfigError when a tensor shape disagrees with the config.
  void validate() const;
};

// Scaled-normal initialisation, deterministic under the seed.
ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed);

struct NeuronId {
  std::size_t layer = 0;
  std::size_t neuron = 0;
  auto operator<=>(const NeuronId&) const = default;
};

using DeactivationSet = std::set<NeuronId>;

void validate_deactivations(const DeactivationSet& set, const ModelConfig& config);

// Per-layer additive attention masks layered on top of the causal mask.
// Entries are 0 or -infinity. Layers without an entry get no extra mask. A
// mask built for length n applies to any prefix of length <= n.
class AdditiveMask {
 public:
  AdditiveMask() = default;
  explicit AdditiveMask(std::size_t seq_len) : seq_len_(seq_len) {}

  static constexpr Real blocked() { return -std::numeric_limits<Real>::infinity(); }

  void block(std::size_t layer, std::size_t row, std::size_t col);
  bool empty() const { return layers_.empty(); }
  std::size_t seq_len() const { return seq_len_; }
  bool has_layer(std::size_t layer) const { return layers_.contains(layer); }
  Real at(std::size_t layer, std::size_t row, std::size_t col) const;
  const std::map<std::size_t, std::vector<Real>>& layers() const { return layers_; }

 private:
  std::size_t seq_len_ = 0;
  std::map<std::size_t, std::vector<Real>> layers_;
};

enum class TraceLevel { none, attention, full };

// Adds `delta` to one post-softmax attention probability. Used by
// finite-difference checks of attention gradients.
struct AttentionNudge {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  Real delta = 0;
};

struct ForwardOptions {
  const AdditiveMask* extra_mask = nullptr;
  const DeactivationSet* deactivations = nullptr;
  TraceLevel trace = TraceLevel::none;
  // Records the graph from the input embedding onward so that attention
  // matrices receive gradients after backward(); weights are not touched.
  bool differentiable = false;
  std::vector<AttentionNudge> nudges;
};

struct ForwardTrace {
  TraceLevel level = TraceLevel::none;
  std::size_t seq_len = 0;
  std::vector<std::vector<Tensor>> attention;  // [layer][head], seq × seq post-softmax
  std::vector<Tensor> gate_activations;        // [layer], seq × d_ff, act_fn(h W_gate)
  std::vector<Tensor> mha_delta;               // [layer], seq × d_model
  std::vector<Tensor> mlp_delta;               // [layer], seq × d_model
  std::vector<Tensor> hidden;                  // [layer], post-block residual stream
  Tensor embedded;                             // residual stream before layer 0
  Tensor final_hidden;                         // == hidden.back()
};

struct ForwardResult {
  Tensor logits;  // seq × vocab
  ForwardTrace trace;
};

// Throws RangeError on overlength sequences, bad token ids, bad deactivation
// indices; DimensionError when the extra mask is shorter than the sequence.
ForwardResult forward(const ModelWeights& weights, std::span<const TokenId> tokens,
                      const ForwardOptions& options = {});

// Residual stream after the last block (pre final-norm), for callers that
// only unembed a subset of rows.
Tensor forward_hidden(const ModelWeights& weights, std::span<const TokenId> tokens,
                      const ForwardOptions& options, ForwardTrace* trace);

// Several independent sequences stacked row-wise (no trace, no interventions).
// Row-wise ops run on the whole stack; attention stays within each sequence.
Tensor forward_batch_hidden(const ModelWeights& weights,
                            std::span<const std::vector<TokenId>> sequences);

// Final layernorm then W^U.
Tensor unembed(const ModelWeights& weights, const Tensor& hidden);

struct GenerateOptions {
  std::size_t max_new = 8;
  std::set<TokenId> stop_tokens;
  const AdditiveMask* extra_mask = nullptr;
  const DeactivationSet* deactivations = nullptr;
};

// Greedy continuation; ties go to the lowest token id. A generated stop token
// ends generation and is not part of the result.
std::vector<TokenId> generate_greedy(const ModelWeights& weights,
                                     std::span<const TokenId> prompt,
                                     const GenerateOptions& options);

std::size_t argmax_lowest(std::span<const Real> values);

struct SequenceProb {
  double joint_logprob = 0;   // Σ log p(token)
  double geometric_mean = 0;  // exp(joint / length)
};

SequenceProb sequence_logprob(const ModelWeights& weights, std::span<const TokenId> prompt,
                              std::span<const TokenId> continuation,
                              const AdditiveMask* extra_mask = nullptr,
                              const DeactivationSet* deactivations = nullptr);

enum class LensMode { cumulative, increment };
enum class LensSource { post_mha, post_mlp };

// Unembeds the residual stream (cumulative) or a single module's increment at
// (layer, source) for one position. Requires a full trace.
std::vector<Real> logit_lens(const ModelWeights& weights, const ForwardTrace& trace,
                             std::size_t position, LensMode mode, std::size_t layer,
                             LensSource source);

}  // namespace raglab
