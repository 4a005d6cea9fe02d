#include "raglab/model.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "raglab/error.h"
#include "raglab/random.h"

namespace raglab {

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0 ||
      max_seq == 0) {
    throw ConfigError("model dimensions must all be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (!(layernorm_eps > 0)) throw ConfigError("layernorm_eps must be positive");
}

std::vector<std::pair<std::string, Tensor*>> ModelWeights::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("token_embedding", &token_embedding);
  out.emplace_back("position_embedding", &position_embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    auto& l = layers[i];
    out.emplace_back(p + "attn_norm.gain", &l.attn_norm_gain);
    out.emplace_back(p + "attn_norm.bias", &l.attn_norm_bias);
    out.emplace_back(p + "attn.wq", &l.wq);
    out.emplace_back(p + "attn.wk", &l.wk);
    out.emplace_back(p + "attn.wv", &l.wv);
    out.emplace_back(p + "attn.wo", &l.wo);
    out.emplace_back(p + "mlp_norm.gain", &l.mlp_norm_gain);
    out.emplace_back(p + "mlp_norm.bias", &l.mlp_norm_bias);
    out.emplace_back(p + "mlp.w_gate", &l.w_gate);
    out.emplace_back(p + "mlp.w_up", &l.w_up);
    out.emplace_back(p + "mlp.w_down", &l.w_down);
  }
  out.emplace_back("final_norm.gain", &final_norm_gain);
  out.emplace_back("final_norm.bias", &final_norm_bias);
  if (!config.tie_embeddings) out.emplace_back("unembedding", &unembedding);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelWeights::named_tensors() const {
  auto mutable_list = const_cast<ModelWeights*>(this)->named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mutable_list.size());
  for (auto& [name, t] : mutable_list) out.emplace_back(name, t);
  return out;
}

ModelWeights ModelWeights::clone() const {
  ModelWeights copy = *this;
  for (auto& [name, t] : copy.named_tensors()) *t = t->clone();
  if (config.tie_embeddings) copy.unembedding = copy.token_embedding;
  return copy;
}

void ModelWeights::set_requires_grad(bool value) {
  for (auto& [name, t] : named_tensors()) t->set_requires_grad(value);
}

void ModelWeights::validate() const {
  config.validate();
  const auto& c = config;
  auto expect = [](const Tensor& t, Shape shape, const std::string& name) {
    if (!t.defined() || t.shape() != shape) {
      throw ConfigError("tensor '" + name + "' has shape " +
                        (t.defined() ? shape_string(t.shape()) : "(undefined)") + ", expected " +
                        shape_string(shape));
    }
  };
  expect(token_embedding, {c.vocab_size, c.d_model}, "token_embedding");
  expect(position_embedding, {c.max_seq, c.d_model}, "position_embedding");
  if (layers.size() != c.n_layers) throw ConfigError("layer count disagrees with n_layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    expect(l.attn_norm_gain, {c.d_model}, p + "attn_norm.gain");
    expect(l.attn_norm_bias, {c.d_model}, p + "attn_norm.bias");
    expect(l.wq, {c.d_model, c.d_model}, p + "attn.wq");
    expect(l.wk, {c.d_model, c.d_model}, p + "attn.wk");
    expect(l.wv, {c.d_model, c.d_model}, p + "attn.wv");
    expect(l.wo, {c.d_model, c.d_model}, p + "attn.wo");
    expect(l.mlp_norm_gain, {c.d_model}, p + "mlp_norm.gain");
    expect(l.mlp_norm_bias, {c.d_model}, p + "mlp_norm.bias");
    expect(l.w_gate, {c.d_model, c.d_ff}, p + "mlp.w_gate");
    expect(l.w_up, {c.d_model, c.d_ff}, p + "mlp.w_up");
    expect(l.w_down, {c.d_ff, c.d_model}, p + "mlp.w_down");
  }
  expect(final_norm_gain, {c.d_model}, "final_norm.gain");
  expect(final_norm_bias, {c.d_model}, "final_norm.bias");
  expect(unembedding, {c.vocab_size, c.d_model}, "unembedding");
}

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  auto normal = [&rng](Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = static_cast<Real>(rng.normal() * stddev);
    return t;
  };
  const double d = static_cast<double>(config.d_model);
  const double proj_std = 1.0 / std::sqrt(d);
  const double out_std = proj_std / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  const double down_std = 1.0 / std::sqrt(static_cast<double>(config.d_ff)) /
                          std::sqrt(2.0 * static_cast<double>(config.n_layers));

  ModelWeights w;
  w.config = config;
  w.token_embedding = normal({config.vocab_size, config.d_model}, 0.1);
  w.position_embedding = normal({config.max_seq, config.d_model}, 0.1);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    LayerWeights l;
    l.attn_norm_gain = Tensor({config.d_model}, Real(1));
    l.attn_norm_bias = Tensor({config.d_model}, Real(0));
    l.wq = normal({config.d_model, config.d_model}, proj_std);
    l.wk = normal({config.d_model, config.d_model}, proj_std);
    l.wv = normal({config.d_model, config.d_model}, proj_std);
    l.wo = normal({config.d_model, config.d_model}, out_std);
    l.mlp_norm_gain = Tensor({config.d_model}, Real(1));
    l.mlp_norm_bias = Tensor({config.d_model}, Real(0));
    l.w_gate = normal({config.d_model, config.d_ff}, proj_std);
    l.w_up = normal({config.d_model, config.d_ff}, proj_std);
    l.w_down = normal({config.d_ff, config.d_model}, down_std);
    w.layers.push_back(std::move(l));
  }
  w.final_norm_gain = Tensor({config.d_model}, Real(1));
  w.final_norm_bias = Tensor({config.d_model}, Real(0));
  w.unembedding = config.tie_embeddings ? w.token_embedding
                                        : normal({config.vocab_size, config.d_model}, proj_std);
  return w;
}

void validate_deactivations(const DeactivationSet& set, const ModelConfig& config) {
  for (const auto& n : set) {
    if (n.layer >= config.n_layers || n.neuron >= config.d_ff) {
      throw RangeError("deactivation (" + std::to_string(n.layer) + ", " +
                       std::to_string(n.neuron) + ") outside " + std::to_string(config.n_layers) +
                       " layers × " + std::to_string(config.d_ff) + " neurons");
    }
  }
}

void AdditiveMask::block(std::size_t layer, std::size_t row, std::size_t col) {
  if (row >= seq_len_ || col >= seq_len_) {
    throw RangeError("attention mask entry (" + std::to_string(row) + ", " + std::to_string(col) +
                     ") outside sequence length " + std::to_string(seq_len_));
  }
  auto& m = layers_[layer];
  if (m.empty()) m.assign(seq_len_ * seq_len_, Real(0));
  m[row * seq_len_ + col] = blocked();
}

Real AdditiveMask::at(std::size_t layer, std::size_t row, std::size_t col) const {
  auto it = layers_.find(layer);
  if (it == layers_.end()) return Real(0);
  return it->second[row * seq_len_ + col];
}

namespace {

void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw RangeError("empty token sequence");
  if (tokens.size() > c.max_seq) {
    throw RangeError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                     std::to_string(c.max_seq));
  }
  for (auto t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
      throw RangeError("token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(c.vocab_size));
    }
  }
}

Tensor layer_mask(std::size_t len, const AdditiveMask* extra, std::size_t layer) {
  std::vector<Real> m(len * len, Real(0));
  for (std::size_t r = 0; r < len; ++r) {
    for (std::size_t c = r + 1; c < len; ++c) m[r * len + c] = AdditiveMask::blocked();
  }
  if (extra && extra->has_layer(layer)) {
    const auto& e = extra->layers().at(layer);
    const std::size_t n = extra->seq_len();
    for (std::size_t r = 0; r < len; ++r) {
      for (std::size_t c = 0; c <= r; ++c) m[r * len + c] += e[r * n + c];
    }
  }
  return Tensor(Shape{len, len}, std::move(m));
}

Tensor run_blocks(const ModelWeights& weights, std::span<const TokenId> tokens,
                  const std::vector<std::pair<std::size_t, std::size_t>>& segments,
                  const ForwardOptions& options, const AdditiveMask* extra, ForwardTrace* trace) {
  const auto& c = weights.config;
  const std::size_t total = tokens.size();
  const std::size_t dh = c.head_dim();
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
  const TraceLevel level = trace ? options.trace : TraceLevel::none;
  if (trace) {
    *trace = ForwardTrace{};
    trace->level = level;
    trace->seq_len = total;
  }

  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  std::vector<std::size_t> positions;
  positions.reserve(total);
  for (const auto& [offset, len] : segments) {
    for (std::size_t p = 0; p < len; ++p) positions.push_back(p);
  }

  Tensor x;
  if (options.differentiable) {
    {
      NoGradGuard guard;
      x = add(gather_rows(weights.token_embedding, ids),
              gather_rows(weights.position_embedding, positions));
    }
    x = x.detach();
    x.set_requires_grad(true);
  } else {
    x = add(gather_rows(weights.token_embedding, ids),
            gather_rows(weights.position_embedding, positions));
  }
  if (level == TraceLevel::full) trace->embedded = x;

  std::map<std::size_t, Tensor> causal;  // per distinct length, shared by all layers without extras
  auto mask_for = [&](std::size_t len, std::size_t layer) {
    if (extra && extra->has_layer(layer)) return layer_mask(len, extra, layer);
    auto it = causal.find(len);
    if (it == causal.end()) it = causal.emplace(len, layer_mask(len, nullptr, layer)).first;
    return it->second;
  };

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lw = weights.layers[l];

    const Tensor h = layernorm(x, lw.attn_norm_gain, lw.attn_norm_bias,
                               static_cast<Real>(c.layernorm_eps));
    const Tensor q = matmul(h, lw.wq);
    const Tensor k = matmul(h, lw.wk);
    const Tensor v = matmul(h, lw.wv);
    if (level != TraceLevel::none) trace->attention.emplace_back();
    std::vector<Tensor> seq_out;
    seq_out.reserve(segments.size());
    for (const auto& [offset, len] : segments) {
      const Tensor mask = mask_for(len, l);
      std::vector<Tensor> head_out;
      head_out.reserve(c.n_heads);
      for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
        const Tensor qh = slice(q, offset, len, hd * dh, dh);
        const Tensor kh = slice(k, offset, len, hd * dh, dh);
        const Tensor vh = slice(v, offset, len, hd * dh, dh);
        Tensor attn = softmax_masked(scale(matmul_bt(qh, kh), inv_sqrt), mask);
        for (const auto& n : options.nudges) {
          if (n.layer != l || n.head != hd) continue;
          Tensor bump(Shape{len, len}, Real(0));
          bump.mutable_data()[n.row * len + n.col] = n.delta;
          attn = add(attn, bump);
        }
        if (level != TraceLevel::none) trace->attention.back().push_back(attn);
        head_out.push_back(matmul(attn, vh));
      }
      seq_out.push_back(concat_cols(head_out));
    }
    const Tensor heads = seq_out.size() == 1 ? seq_out.front() : concat_rows(seq_out);
    const Tensor mha = matmul(heads, lw.wo);
    x = add(x, mha);

    const Tensor h2 = layernorm(x, lw.mlp_norm_gain, lw.mlp_norm_bias,
                                static_cast<Real>(c.layernorm_eps));
    Tensor gate = act_fn(matmul(h2, lw.w_gate), c.activation);
    if (options.deactivations) {
      std::vector<Real> keep(c.d_ff, Real(1));
      bool any = false;
      for (const auto& n : *options.deactivations) {
        if (n.layer == l) {
          keep[n.neuron] = Real(0);
          any = true;
        }
      }
      if (any) gate = scale_columns(gate, keep);
    }
    const Tensor up = matmul(h2, lw.w_up);
    const Tensor mlp = matmul(mul(gate, up), lw.w_down);
    x = add(x, mlp);

    if (level == TraceLevel::full) {
      trace->gate_activations.push_back(gate);
      trace->mha_delta.push_back(mha);
      trace->mlp_delta.push_back(mlp);
      trace->hidden.push_back(x);
    }
  }
  if (level == TraceLevel::full) trace->final_hidden = x;
  return x;
}

}  // namespace

Tensor forward_hidden(const ModelWeights& weights, std::span<const TokenId> tokens,
                      const ForwardOptions& options, ForwardTrace* trace) {
  const auto& c = weights.config;
  check_tokens(c, tokens);
  if (options.deactivations) validate_deactivations(*options.deactivations, c);
  const AdditiveMask* extra = options.extra_mask;
  if (extra && !extra->empty()) {
    if (extra->seq_len() < tokens.size()) {
      throw DimensionError("extra attention mask covers " + std::to_string(extra->seq_len()) +
                           " positions, sequence has " + std::to_string(tokens.size()));
    }
    for (const auto& [layer, m] : extra->layers()) {
      if (layer >= c.n_layers) {
        throw RangeError("extra attention mask names layer " + std::to_string(layer));
      }
    }
  } else {
    extra = nullptr;
  }
  for (const auto& n : options.nudges) {
    if (n.layer >= c.n_layers || n.head >= c.n_heads || n.row >= tokens.size() ||
        n.col >= tokens.size()) {
      throw RangeError("attention nudge outside the model/sequence");
    }
  }

  return run_blocks(weights, tokens, {{0, tokens.size()}}, options, extra, trace);
}

Tensor forward_batch_hidden(const ModelWeights& weights,
                            std::span<const std::vector<TokenId>> sequences) {
  std::vector<TokenId> flat;
  std::vector<std::pair<std::size_t, std::size_t>> segments;
  for (const auto& s : sequences) {
    check_tokens(weights.config, s);
    segments.emplace_back(flat.size(), s.size());
    flat.insert(flat.end(), s.begin(), s.end());
  }
  if (segments.empty()) throw ContractError("forward_batch_hidden: no sequences");
  return run_blocks(weights, flat, segments, ForwardOptions{}, nullptr, nullptr);
}

Tensor unembed(const ModelWeights& weights, const Tensor& hidden) {
  const Tensor normed = layernorm(hidden, weights.final_norm_gain, weights.final_norm_bias,
                                  static_cast<Real>(weights.config.layernorm_eps));
  return matmul_bt(normed, weights.unembedding);
}

ForwardResult forward(const ModelWeights& weights, std::span<const TokenId> tokens,
                      const ForwardOptions& options) {
  ForwardResult result;
  const Tensor hidden = forward_hidden(weights, tokens, options, &result.trace);
  result.logits = unembed(weights, hidden);
  return result;
}

std::size_t argmax_lowest(std::span<const Real> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::vector<TokenId> generate_greedy(const ModelWeights& weights,
                                     std::span<const TokenId> prompt,
                                     const GenerateOptions& options) {
  if (prompt.empty()) throw ContractError("generate_greedy: empty prompt");
  NoGradGuard guard;
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  ForwardOptions fo;
  fo.extra_mask = options.extra_mask;
  fo.deactivations = options.deactivations;
  for (std::size_t step = 0; step < options.max_new; ++step) {
    if (seq.size() >= weights.config.max_seq) break;
    const Tensor hidden = forward_hidden(weights, seq, fo, nullptr);
    const Tensor last = slice(hidden, hidden.rows() - 1, 1, 0, hidden.cols());
    const Tensor logits = unembed(weights, last);
    const auto next = static_cast<TokenId>(argmax_lowest(logits.data()));
    if (options.stop_tokens.contains(next)) break;
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

SequenceProb sequence_logprob(const ModelWeights& weights, std::span<const TokenId> prompt,
                              std::span<const TokenId> continuation,
                              const AdditiveMask* extra_mask,
                              const DeactivationSet* deactivations) {
  if (prompt.empty()) throw ContractError("sequence_logprob: empty prompt");
  if (continuation.empty()) throw ContractError("sequence_logprob: empty continuation");
  NoGradGuard guard;
  std::vector<TokenId> input(prompt.begin(), prompt.end());
  input.insert(input.end(), continuation.begin(), continuation.end() - 1);
  ForwardOptions fo;
  fo.extra_mask = extra_mask;
  fo.deactivations = deactivations;
  const Tensor hidden = forward_hidden(weights, input, fo, nullptr);
  const Tensor rows = slice(hidden, prompt.size() - 1, continuation.size(), 0, hidden.cols());
  const Tensor logits = unembed(weights, rows);
  const std::size_t vocab = logits.cols();
  const auto lv = logits.data();
  double total = 0;
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const Real* row = lv.data() + i * vocab;
    const Real best = *std::max_element(row, row + vocab);
    double denom = 0;
    for (std::size_t v = 0; v < vocab; ++v) denom += std::exp(static_cast<double>(row[v] - best));
    total += static_cast<double>(row[continuation[i]] - best) - std::log(denom);
  }
  return {total, std::exp(total / static_cast<double>(continuation.size()))};
}

std::vector<Real> logit_lens(const ModelWeights& weights, const ForwardTrace& trace,
                             std::size_t position, LensMode mode, std::size_t layer,
                             LensSource source) {
  if (trace.level != TraceLevel::full || trace.hidden.empty()) {
    throw ContractError("logit_lens: trace lacks hidden states (requires trace level 'full')");
  }
  if (layer >= trace.hidden.size()) throw RangeError("logit_lens: layer out of range");
  if (position >= trace.seq_len) throw RangeError("logit_lens: position out of range");
  NoGradGuard guard;
  const std::size_t d = weights.config.d_model;
  auto row = [&](const Tensor& t) { return slice(t, position, 1, 0, d); };
  Tensor state;
  if (mode == LensMode::increment) {
    state = row(source == LensSource::post_mha ? trace.mha_delta[layer] : trace.mlp_delta[layer]);
  } else if (source == LensSource::post_mlp) {
    state = row(trace.hidden[layer]);
  } else {
    const Tensor& before = layer == 0 ? trace.embedded : trace.hidden[layer - 1];
    state = add(row(before), row(trace.mha_delta[layer]));
  }
  const Tensor logits = unembed(weights, state);
  return {logits.data().begin(), logits.data().end()};
}

}  // namespace raglab
