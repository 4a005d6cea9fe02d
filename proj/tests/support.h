#pragma once

// Fixtures and independent oracles shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "raglab/flow.h"
#include "raglab/model.h"
#include "raglab/random.h"
#include "raglab/tensor.h"

namespace raglab::testing {

inline ModelConfig tiny_config(std::size_t layers = 2, std::size_t heads = 2, std::size_t d_model = 16,
                               std::size_t d_ff = 24, std::size_t vocab = 50, std::size_t max_seq = 64) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d_model;
  c.d_ff = d_ff;
  c.vocab_size = vocab;
  c.max_seq = max_seq;
  return c;
}

// Random weights with non-trivial layernorm parameters so every code path matters.
inline ModelWeights random_model(const ModelConfig& c, std::uint64_t seed) {
  ModelWeights w = init_weights(c, seed);
  Rng rng(seed ^ 0x5eedULL);
  auto jitter = [&](Tensor& t, double base, double spread) {
    for (auto& v : t.mutable_data()) v = static_cast<Real>(base + spread * rng.normal());
  };
  for (auto& l : w.layers) {
    jitter(l.attn_norm_gain, 1.0, 0.2);
    jitter(l.attn_norm_bias, 0.0, 0.1);
    jitter(l.mlp_norm_gain, 1.0, 0.2);
    jitter(l.mlp_norm_bias, 0.0, 0.1);
    for (Tensor* t : {&l.wq, &l.wk}) {
      for (auto& v : t->mutable_data()) v *= 4;  // sharper attention
    }
  }
  jitter(w.final_norm_gain, 1.0, 0.2);
  jitter(w.final_norm_bias, 0.0, 0.1);
  return w;
}

inline std::vector<TokenId> random_tokens(Rng& rng, std::size_t n, std::size_t vocab,
                                          TokenId first = 0) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(first + rng.below(vocab - first));
  return t;
}

// Mean teacher-forced cross-entropy of `answer` after `prompt`, with optional
// post-softmax attention nudges, in plain double arithmetic over the logits.
inline double sft_loss(const ModelWeights& w, const std::vector<TokenId>& prompt,
                       const std::vector<TokenId>& answer,
                       const std::vector<AttentionNudge>& nudges = {}) {
  NoGradGuard guard;
  std::vector<TokenId> input = prompt;
  input.insert(input.end(), answer.begin(), answer.end() - 1);
  ForwardOptions fo;
  fo.nudges = nudges;
  const auto res = forward(w, input, fo);
  double total = 0;
  const std::size_t V = res.logits.cols();
  for (std::size_t k = 0; k < answer.size(); ++k) {
    const std::size_t row = prompt.size() - 1 + k;
    double mx = -1e300;
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, double(res.logits.at(row, v)));
    double z = 0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(double(res.logits.at(row, v)) - mx);
    total -= double(res.logits.at(row, answer[k])) - mx - std::log(z);
  }
  return total / static_cast<double>(answer.size());
}

// Attention tensors of a differentiable forward after backward of the same loss.
inline ForwardTrace attention_with_grads(const ModelWeights& w, const std::vector<TokenId>& prompt,
                                         const std::vector<TokenId>& answer) {
  std::vector<TokenId> input = prompt;
  input.insert(input.end(), answer.begin(), answer.end() - 1);
  ForwardOptions fo;
  fo.trace = TraceLevel::attention;
  fo.differentiable = true;
  ForwardTrace trace;
  const Tensor hidden = forward_hidden(w, input, fo, &trace);
  const Tensor rows = slice(hidden, prompt.size() - 1, answer.size(), 0, hidden.cols());
  const Tensor logits = unembed(w, rows);
  backward(cross_entropy(logits, answer, std::vector<bool>(answer.size(), true)));
  return trace;
}

inline double rel_err(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Triple loop over (matrix, row, column) with the same row/column binding as
// the library's conventions, written without any shared code.
inline double naive_flow(const std::vector<Tensor>& mats, const std::vector<std::size_t>& src,
                         const std::vector<std::size_t>& tgt, bool source_first, bool mean) {
  const auto& rows = source_first ? tgt : src;
  const auto& cols = source_first ? src : tgt;
  double s = 0;
  for (const auto& m : mats) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      if (std::find(rows.begin(), rows.end(), i) == rows.end()) continue;
      for (std::size_t j = 0; j < m.cols(); ++j) {
        if (i == j || std::find(cols.begin(), cols.end(), j) == cols.end()) continue;
        s += double(m.at(i, j));
      }
    }
  }
  if (mean) s /= double(mats.size() * rows.size() * cols.size());
  return s;
}

// Exhaustive search over all boundary triples of a 4-piece constant fit.
inline std::array<std::size_t, 3> brute_force_boundaries(const std::vector<double>& curve) {
  const std::size_t n = curve.size();
  auto sse = [&](std::size_t b, std::size_t e) {
    double m = 0;
    for (std::size_t i = b; i < e; ++i) m += curve[i];
    m /= double(e - b);
    double s = 0;
    for (std::size_t i = b; i < e; ++i) s += (curve[i] - m) * (curve[i] - m);
    return s;
  };
  double best = 1e300;
  std::array<std::size_t, 3> arg{};
  for (std::size_t a = 1; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      for (std::size_t c = b + 1; c < n; ++c) {
        const double cost = sse(0, a) + sse(a, b) + sse(b, c) + sse(c, n);
        if (cost < best - 1e-12) {
          best = cost;
          arg = {a, b, c};
        }
      }
    }
  }
  return arg;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  const auto x = a.data(), y = b.data();
  if (x.size() != y.size()) return INFINITY;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(double(x[i]) - double(y[i])));
  return m;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("raglab_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace raglab::testing
