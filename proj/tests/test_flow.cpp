#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "raglab/error.h"
#include "raglab/flow.h"
#include "support.h"

using namespace raglab;
using namespace raglab::testing;

namespace {

Tensor random_causal_stochastic(Rng& rng, std::size_t n, bool zero_diagonal = false) {
  std::vector<Real> v(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      if (zero_diagonal && i == j && i > 0) continue;
      v[i * n + j] = static_cast<Real>(rng.uniform() + 1e-3);
      s += v[i * n + j];
    }
    for (std::size_t j = 0; j <= i; ++j) v[i * n + j] = static_cast<Real>(v[i * n + j] / s);
  }
  return Tensor::matrix(n, n, v);
}

ForwardTrace random_trace(Rng& rng, std::size_t layers, std::size_t heads, std::size_t n) {
  ForwardTrace t;
  t.level = TraceLevel::attention;
  t.seq_len = n;
  t.attention.resize(layers);
  for (auto& l : t.attention) {
    for (std::size_t h = 0; h < heads; ++h) l.push_back(random_causal_stochastic(rng, n));
  }
  return t;
}

// Four disjoint nonempty random index sets over [0, n).
SpanMap random_spans(Rng& rng, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle(idx);
  std::vector<std::vector<std::size_t>> parts(4);
  for (std::size_t r = 0; r < 4; ++r) parts[r].push_back(idx[r]);
  for (std::size_t i = 4; i < n; ++i) {
    const auto r = rng.below(5);
    if (r < 4) parts[r].push_back(idx[i]);
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  SpanMap s;
  s.context = parts[0];
  s.key = parts[1];
  s.query = parts[2];
  s.answer = parts[3];
  s.prompt_length = n;
  return s;
}

const SpanRole kRoles[] = {SpanRole::context, SpanRole::key, SpanRole::query, SpanRole::answer};

}  // namespace

TEST_CASE("attention_flow equals the naive triple loop on 100 random traces") {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 4 + rng.below(61), heads = 1 + rng.below(8), layers = 1 + rng.below(3);
    const auto trace = random_trace(rng, layers, heads, n);
    const auto spans = random_spans(rng, n);
    for (auto src : kRoles) {
      for (auto dst : kRoles) {
        if (src == dst) continue;
        for (auto conv : {FlowConvention::source_first, FlowConvention::literal}) {
          for (auto norm : {FlowNorm::raw, FlowNorm::mean}) {
            const auto f = attention_flow(trace, spans, src, dst, norm, conv);
            REQUIRE(f.size() == layers);
            for (std::size_t l = 0; l < layers; ++l) {
              const double o = naive_flow(trace.attention[l], spans.indices(src), spans.indices(dst),
                                          conv == FlowConvention::source_first, norm == FlowNorm::mean);
              CHECK(std::abs(f[l] - o) <= 1e-9);
            }
          }
        }
      }
    }
  }
}

TEST_CASE("causally unreachable flow is exactly zero on a real model") {
  const auto w = random_model(tiny_config(3, 2), 2);
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 6 + rng.below(20);
    ForwardOptions fo;
    fo.trace = TraceLevel::attention;
    const auto r = forward(w, random_tokens(rng, n, 50), fo);
    const std::size_t cut = 1 + rng.below(n - 2);
    SpanMap s;
    for (std::size_t i = 0; i < cut; ++i) s.query.push_back(i);       // target first
    for (std::size_t i = cut; i < n; ++i) s.key.push_back(i);         // source after it
    for (auto v : attention_flow(r.trace, s, SpanRole::key, SpanRole::query)) CHECK(v == 0);
    // The literal binding reads the same pair the other way round.
    for (auto v : attention_flow(r.trace, s, SpanRole::query, SpanRole::key, FlowNorm::raw,
                                 FlowConvention::literal)) {
      CHECK(v == 0);
    }
  }
}

TEST_CASE("uniform causal attention: m/n per target row") {
  const std::size_t n = 7;
  std::vector<Real> v(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) v[i * n + j] = Real(1) / Real(i + 1);
  }
  ForwardTrace t;
  t.level = TraceLevel::attention;
  t.attention = {{Tensor::matrix(n, n, v)}};
  SpanMap s;
  s.key = {0, 1, 2, 3};  // m = 4 source columns before the target row
  s.query = {6};         // row 6 has n = 7 unmasked columns
  CHECK(attention_flow(t, s, SpanRole::key, SpanRole::query)[0] == doctest::Approx(4.0 / 7));
  s.query = {4, 6};
  CHECK(attention_flow(t, s, SpanRole::key, SpanRole::query)[0] == doctest::Approx(4.0 / 5 + 4.0 / 7));
}

TEST_CASE("single target row over every other position sums to heads minus the diagonal") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + rng.below(20), heads = 1 + rng.below(6);
    auto trace = random_trace(rng, 1, heads, n);
    const std::size_t row = 1 + rng.below(n - 1);
    SpanMap s;
    s.query = {row};
    for (std::size_t j = 0; j < row; ++j) s.key.push_back(j);
    double diag = 0;
    for (const auto& a : trace.attention[0]) diag += a.at(row, row);
    CHECK(attention_flow(trace, s, SpanRole::key, SpanRole::query)[0] ==
          doctest::Approx(double(heads) - diag).epsilon(1e-12));
    ForwardTrace z;
    z.level = TraceLevel::attention;
    z.attention = {{}};
    for (std::size_t h = 0; h < heads; ++h) z.attention[0].push_back(random_causal_stochastic(rng, n, true));
    CHECK(attention_flow(z, s, SpanRole::key, SpanRole::query)[0] ==
          doctest::Approx(double(heads)).epsilon(1e-12));
  }
}

TEST_CASE("flow is invariant to head order, and empty spans are errors") {
  Rng rng(4);
  auto trace = random_trace(rng, 2, 5, 12);
  const auto spans = random_spans(rng, 12);
  const auto before = attention_flow(trace, spans, SpanRole::key, SpanRole::answer);
  for (auto& l : trace.attention) std::reverse(l.begin(), l.end());
  const auto after = attention_flow(trace, spans, SpanRole::key, SpanRole::answer);
  for (std::size_t l = 0; l < 2; ++l) CHECK(before[l] == doctest::Approx(after[l]).epsilon(1e-14));
  SpanMap empty_key = spans;
  empty_key.key.clear();
  CHECK_THROWS_AS(attention_flow(trace, empty_key, SpanRole::key, SpanRole::query), EmptySpanError);
  CHECK_THROWS_AS(attention_flow(ForwardTrace{}, spans, SpanRole::key, SpanRole::query), ContractError);
}

TEST_CASE("saliency_flow: zeros, attention substitution and naive oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 4 + rng.below(30), layers = 1 + rng.below(4);
    const auto spans = random_spans(rng, n);
    std::vector<Tensor> zeros(layers, Tensor({n, n}, 0));
    for (auto v : saliency_flow(zeros, spans, SpanRole::key, SpanRole::query)) CHECK(v == 0);
    const auto trace = random_trace(rng, layers, 1, n);
    std::vector<Tensor> att;
    for (const auto& l : trace.attention) att.push_back(l[0]);
    CHECK(saliency_flow(att, spans, SpanRole::key, SpanRole::context) ==
          attention_flow(trace, spans, SpanRole::key, SpanRole::context));
    std::vector<Tensor> s;
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<Real> v(n * n);
      for (auto& x : v) x = static_cast<Real>(rng.uniform() * 3);
      s.push_back(Tensor::matrix(n, n, v));
    }
    const auto f = saliency_flow(s, spans, SpanRole::key, SpanRole::answer, FlowNorm::mean);
    for (std::size_t l = 0; l < layers; ++l) {
      CHECK(std::abs(f[l] - naive_flow({s[l]}, spans.key, spans.answer, true, true)) <= 1e-9);
    }
  }
}

TEST_CASE("saliency_from_trace uses |G * A| and ignores gradient signs") {
  const std::size_t n = 5;
  for (Real sign : {Real(1), Real(-1)}) {
    ForwardTrace t;
    t.level = TraceLevel::attention;
    t.attention.resize(1);
    std::vector<Tensor> coeffs;
    Rng local(7);
    for (int h = 0; h < 2; ++h) {
      Tensor a = random_causal_stochastic(local, n);
      a.set_requires_grad(true);
      std::vector<Real> c(n * n);
      for (auto& x : c) x = static_cast<Real>(sign * local.normal());
      coeffs.push_back(Tensor::matrix(n, n, c));
      backward(sum(mul(a, coeffs.back())));  // grad(a) = c
      t.attention[0].push_back(a);
    }
    const auto plain = saliency_from_trace(t, false);
    const auto trans = saliency_from_trace(t, true);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double p = 0, q = 0;
        for (int h = 0; h < 2; ++h) {
          p += std::abs(coeffs[h].at(i, j) * t.attention[0][h].at(i, j));
          q += std::abs(coeffs[h].at(i, j) * t.attention[0][h].at(j, i));
        }
        CHECK(plain[0].at(i, j) == doctest::Approx(p).epsilon(1e-14));
        CHECK(trans[0].at(i, j) == doctest::Approx(q).epsilon(1e-14));
      }
    }
  }
  ForwardTrace no_grads;
  no_grads.level = TraceLevel::attention;
  no_grads.attention = {{Tensor({3, 3}, 0.1)}};
  CHECK_THROWS_AS(saliency_from_trace(no_grads, false), ContractError);
}

TEST_CASE("saliency matrices: zero value route, loss scaling and finite differences") {
  const auto cfg = tiny_config(2, 2, 16, 24, 50);
  Rng rng(8);
  const auto prompt = random_tokens(rng, 6, 50);
  const auto answer = random_tokens(rng, 2, 50);

  auto dead = random_model(cfg, 9);
  for (auto& l : dead.layers) {
    for (auto& v : l.wv.mutable_data()) v = 0;
  }
  for (const auto& s : saliency_matrices(dead, prompt, answer)) {
    for (auto v : s.data()) CHECK(v == 0);
  }

  const auto w = random_model(cfg, 10);
  const auto base = saliency_matrices(w, prompt, answer);
  SaliencyOptions twice;
  twice.loss_scale = 2;
  const auto doubled = saliency_matrices(w, prompt, answer, twice);
  for (std::size_t l = 0; l < base.size(); ++l) {
    for (std::size_t i = 0; i < base[l].size(); ++i) {
      CHECK(doubled[l].data()[i] == doctest::Approx(2 * base[l].data()[i]).epsilon(1e-12));
    }
  }

  // Each entry against Σ_h |finite-difference gradient × attention|.
  ForwardOptions fo;
  fo.trace = TraceLevel::attention;
  std::vector<TokenId> input = prompt;
  input.insert(input.end(), answer.begin(), answer.end() - 1);
  const auto att = forward(w, input, fo).trace.attention;
  const std::size_t n = input.size();
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double expect = 0;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
          const double e = 1e-5;
          const double g = (sft_loss(w, prompt, answer, {{l, h, i, j, Real(e)}}) -
                            sft_loss(w, prompt, answer, {{l, h, i, j, Real(-e)}})) / (2 * e);
          expect += std::abs(g * att[l][h].at(i, j));
        }
        CHECK(rel_err(expect, base[l].at(i, j), 1e-6) <= 1e-3);
      }
    }
  }
  NoGradGuard off;
  CHECK_THROWS_AS(saliency_matrices(w, prompt, answer), ContractError);
}

TEST_CASE("flow profiles: single example, permutation and streaming mean") {
  const auto cfg = tiny_config(4, 2, 16, 24, 50);
  const auto w = random_model(cfg, 11);
  Rng rng(12);
  std::vector<FlowProfile> profiles;
  for (int e = 0; e < 5; ++e) {
    AssembledPrompt p;
    p.tokens = random_tokens(rng, 14, 50);
    p.spans.context = {0, 1, 2, 4};
    p.spans.key = {3};
    p.spans.query = {5, 6, 7, 8};
    p.spans.answer = {12, 13};
    p.spans.prompt_length = 14;
    profiles.push_back(flow_profile(w, p, random_tokens(rng, 2, 50)));
    for (const auto* group : {&profiles.back().attention, &profiles.back().saliency,
                              &profiles.back().saliency_transposed}) {
      for (const auto& curve : *group) {
        CHECK(curve.size() == cfg.n_layers);
        for (auto v : curve) CHECK(v >= 0);
      }
    }
  }
  const auto one = mean_profile(std::span(profiles.data(), 1));
  CHECK(one.attention == profiles[0].attention);
  CHECK(one.saliency == profiles[0].saliency);

  const auto mean = mean_profile(profiles);
  auto shuffled = profiles;
  std::reverse(shuffled.begin(), shuffled.end());
  const auto mean2 = mean_profile(shuffled);
  for (int d = 0; d < 3; ++d) {
    std::vector<double> stream(cfg.n_layers, 0);
    for (std::size_t k = 0; k < profiles.size(); ++k) {
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        stream[l] += (profiles[k].saliency[d][l] - stream[l]) / double(k + 1);
      }
    }
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      CHECK(std::abs(mean.saliency[d][l] - stream[l]) <= 1e-9);
      CHECK(std::abs(mean.attention[d][l] - mean2.attention[d][l]) <= 1e-12);
    }
  }
  CHECK(mean.n_examples == 5);
  const auto back = profile_from_json(profile_to_json(mean));
  CHECK(back.attention == mean.attention);
  CHECK(back.saliency_transposed == mean.saliency_transposed);
  CHECK(back.n_examples == mean.n_examples);
  CHECK_THROWS_AS(mean_profile(std::span<const FlowProfile>{}), ContractError);
  FlowProfile other = profiles[0];
  other.convention = FlowConvention::literal;
  std::vector<FlowProfile> mixed = {profiles[0], other};
  CHECK_THROWS_AS(mean_profile(mixed), ContractError);
}

TEST_CASE("stage segmentation: quartiles, minimal case, errors") {
  const auto q = segment_quartile(32);
  CHECK(q.ranges[0] == std::pair<std::size_t, std::size_t>{0, 8});
  CHECK(q.ranges[1] == std::pair<std::size_t, std::size_t>{8, 16});
  CHECK(q.ranges[2] == std::pair<std::size_t, std::size_t>{16, 24});
  CHECK(q.ranges[3] == std::pair<std::size_t, std::size_t>{24, 32});
  const auto four = segment_quartile(4);
  for (std::size_t s = 0; s < 4; ++s) CHECK(four.ranges[s] == std::pair<std::size_t, std::size_t>{s, s + 1});
  CHECK_THROWS_AS(segment_quartile(3), RangeError);
  CHECK_THROWS_AS(segment_changepoint(std::vector<double>{1, 2, 3}), RangeError);
  CHECK(q.layers(Stage::elicitation).front() == 8);
  CHECK(parse_stage("contestation") == Stage::contestation);
  CHECK_THROWS_AS(parse_stage("nope"), ConfigError);
}

TEST_CASE("changepoint recovers planted step curves and matches exhaustive search") {
  Rng rng(13);
  auto check_valid = [](const StageSegmentation& s, std::size_t n) {
    CHECK(s.ranges[0].first == 0);
    CHECK(s.ranges[3].second == n);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(s.ranges[k].first < s.ranges[k].second);
      if (k) CHECK(s.ranges[k].first == s.ranges[k - 1].second);
    }
  };
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 4 + rng.below(37);
    // Planted step curve with three distinct jumps.
    std::vector<std::size_t> cuts;
    while (cuts.size() < 3) {
      const std::size_t c = 1 + rng.below(n - 1);
      if (std::find(cuts.begin(), cuts.end(), c) == cuts.end()) cuts.push_back(c);
    }
    std::sort(cuts.begin(), cuts.end());
    std::vector<double> curve(n);
    double level = rng.normal();
    for (std::size_t i = 0, k = 0; i < n; ++i) {
      if (k < 3 && i == cuts[k]) {
        level += (rng.below(2) ? 1 : -1) * (1 + rng.uniform());
        ++k;
      }
      curve[i] = level;
    }
    const auto seg = segment_changepoint(curve);
    check_valid(seg, n);
    CHECK(seg.ranges[1].first == cuts[0]);
    CHECK(seg.ranges[2].first == cuts[1]);
    CHECK(seg.ranges[3].first == cuts[2]);
    const auto brute = brute_force_boundaries(curve);
    CHECK(brute == std::array<std::size_t, 3>{cuts[0], cuts[1], cuts[2]});

    // Noisy curves: the optimum cost must match the exhaustive optimum.
    std::vector<double> noisy(n);
    for (auto& v : noisy) v = rng.normal();
    const auto s2 = segment_changepoint(noisy);
    check_valid(s2, n);
    const auto b2 = brute_force_boundaries(noisy);
    double c_dp = 0, c_bf = 0;
    for (std::size_t k = 0; k < 4; ++k) c_dp += segment_sse(noisy, s2.ranges[k].first, s2.ranges[k].second);
    const std::array<std::size_t, 5> edges = {0, b2[0], b2[1], b2[2], n};
    for (std::size_t k = 0; k < 4; ++k) c_bf += segment_sse(noisy, edges[k], edges[k + 1]);
    CHECK(c_dp <= c_bf + 1e-9);
    check_valid(segment_quartile(n), n);
  }
}
