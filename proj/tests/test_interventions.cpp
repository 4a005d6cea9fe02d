#include <doctest.h>

#include <cmath>

#include "raglab/error.h"
#include "raglab/harness.h"
#include "raglab/interventions.h"
#include "support.h"

using namespace raglab;
using namespace raglab::testing;

namespace {

// Rows of a 16×16 Sylvester Hadamard matrix: ±1, zero-mean (row > 0), orthogonal.
std::vector<Real> code(std::size_t row) {
  std::vector<Real> v(16);
  for (std::size_t c = 0; c < 16; ++c) v[c] = (__builtin_popcount(unsigned(row & c)) % 2) ? -1 : 1;
  return v;
}

void set_row(Tensor& t, std::size_t row, const std::vector<Real>& v, Real s = 1) {
  auto d = t.mutable_data();
  for (std::size_t c = 0; c < v.size(); ++c) d[row * t.cols() + c] = s * v[c];
}

void set_col(Tensor& t, std::size_t col, const std::vector<Real>& v, Real s = 1) {
  auto d = t.mutable_data();
  for (std::size_t r = 0; r < v.size(); ++r) d[r * t.cols() + col] = s * v[r];
}

// Prompt [K, Q, A]; the answer token X is predictable only from a feature that
// layer 0 copies from K into Q and layer 1 copies from Q into A. Token and
// position embeddings are orthogonal ±1 codes, so every layernorm is a scaling.
ModelWeights relay_model() {
  ModelConfig c = tiny_config(2, 1, 16, 4, 8, 8);
  ModelWeights w = init_weights(c, 1);
  for (auto& [name, t] : w.named_tensors()) {
    for (auto& v : t->mutable_data()) v = 0;
  }
  for (auto& l : w.layers) {
    for (auto& v : l.attn_norm_gain.mutable_data()) v = 1;
    for (auto& v : l.mlp_norm_gain.mutable_data()) v = 1;
  }
  for (auto& v : w.final_norm_gain.mutable_data()) v = 1;
  const auto c0 = code(1), c1 = code(2), c2 = code(3), tK = code(4), tQ = code(5), tA = code(6),
             z = code(7), z2 = code(8), tX = code(9);
  set_row(w.position_embedding, 0, c0);
  set_row(w.position_embedding, 1, c1);
  set_row(w.position_embedding, 2, c2);
  set_row(w.token_embedding, 0, tK);
  set_row(w.token_embedding, 1, tQ);
  set_row(w.token_embedding, 2, tA);
  set_row(w.token_embedding, 3, tX);
  const Real alpha = 10;
  auto& l0 = w.layers[0];
  set_col(l0.wq, 0, c1);         // Q position asks for ...
  set_col(l0.wk, 0, tK, alpha);  // ... the K token
  set_col(l0.wq, 1, c2);         // A position attends to itself
  set_col(l0.wk, 1, c2, alpha);
  set_col(l0.wv, 2, tK);         // value carries "is K"
  set_row(l0.wo, 2, z, Real(0.2));
  auto& l1 = w.layers[1];
  set_col(l1.wq, 0, c2);         // A position asks for the Q position
  set_col(l1.wk, 0, c1, alpha);
  set_col(l1.wv, 2, z);          // value carries the relayed feature
  set_row(l1.wo, 2, z2, Real(0.2));
  set_row(w.unembedding, 3, z2, 3);
  return w;
}

AssembledPrompt relay_prompt() {
  AssembledPrompt p;
  p.tokens = {0, 1, 2};
  p.spans.key = {0};
  p.spans.query = {1};
  p.spans.answer = {2};
  p.spans.prompt_length = 3;
  return p;
}

}  // namespace

TEST_CASE("attention cut mask entries and errors") {
  SpanMap s;
  s.key = {1, 2};
  s.query = {4, 6};
  s.context = {0};
  const std::size_t n = 8;
  CHECK(build_attention_cut(s, std::vector<std::size_t>{}, n).empty());
  const std::vector<std::size_t> layers = {0, 2};
  const auto m = build_attention_cut(s, layers, n);
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const bool hit = (l == 0 || l == 2) && (i == 4 || i == 6) && (j == 1 || j == 2);
        CHECK(m.at(l, i, j) == (hit ? AdditiveMask::blocked() : 0));
      }
    }
  }
  SpanMap no_query = s;
  no_query.query.clear();
  CHECK_THROWS_AS(build_attention_cut(no_query, layers, n), EmptySpanError);
}

TEST_CASE("k->q cut over all layers forces zero k->q flow in the masked forward") {
  const auto cfg = tiny_config(3, 2);
  const auto w = random_model(cfg, 3);
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 10 + rng.below(10);
    AssembledPrompt p;
    p.tokens = random_tokens(rng, n, 50);
    p.spans.context = {0, 1};
    p.spans.key = {2, 3};
    p.spans.query = {5, 6, 7};
    p.spans.answer = {n - 2, n - 1};
    const std::vector<std::size_t> all = {0, 1, 2};
    const auto mask = build_attention_cut(p.spans, all, n);
    ForwardOptions fo;
    fo.trace = TraceLevel::attention;
    fo.extra_mask = &mask;
    const auto masked = forward(w, p.tokens, fo);
    for (auto v : attention_flow(masked.trace, p.spans, SpanRole::key, SpanRole::query)) CHECK(v == 0);
    const auto plain = forward(w, p.tokens);
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t v = 0; v < 50; ++v) CHECK(plain.logits.at(r, v) == masked.logits.at(r, v));
    }
  }
}

TEST_CASE("prob_delta: null cut, antisymmetry and recomputation") {
  const auto cfg = tiny_config(4, 2);
  const auto w = random_model(cfg, 5);
  Rng rng(6);
  const auto seg = segment_quartile(4);
  for (int trial = 0; trial < 10; ++trial) {
    AssembledPrompt p;
    p.tokens = random_tokens(rng, 12, 50);
    p.spans.key = {2, 3};
    p.spans.query = {6, 7, 8};
    p.spans.answer = {10, 11};
    const auto ans = random_tokens(rng, 1 + rng.below(3), 50);
    const auto none = prob_delta(w, p, ans, std::vector<std::size_t>{});
    CHECK(none.d == 0);
    CHECK(none.masked == none.unmasked);
    for (auto mode : {ProbMode::geometric_mean, ProbMode::joint}) {
      const auto deltas = stage_deltas(w, p, ans, seg, mode);
      for (int s = 0; s < 4; ++s) {
        const auto layers = seg.layers(static_cast<Stage>(s));
        const auto mask = build_attention_cut(p.spans, layers, p.tokens.size() + ans.size());
        const double un = sequence_probability(sequence_logprob(w, p.tokens, ans), mode);
        const double ma = sequence_probability(sequence_logprob(w, p.tokens, ans, &mask), mode);
        CHECK(std::abs(deltas[s].d - (un - ma)) <= 1e-9);
        CHECK((ma - un) == -deltas[s].d);
        const auto single = prob_delta(w, p, ans, layers, mode);
        CHECK(std::abs(single.d - deltas[s].d) <= 1e-12);
      }
    }
  }
  AssembledPrompt p;
  p.tokens = {1, 2, 3};
  p.spans.key = {0};
  p.spans.query = {1};
  CHECK_THROWS_AS(prob_delta(w, p, std::vector<TokenId>{}, std::vector<std::size_t>{0}), ContractError);
  SequenceProb sp{std::log(0.25), 0.5};
  CHECK(sequence_probability(sp, ProbMode::joint) == doctest::Approx(0.25));
  CHECK(sequence_probability(sp, ProbMode::geometric_mean) == 0.5);
}

TEST_CASE("hand-built relay model: cutting k->q removes the only route to the answer") {
  const auto w = relay_model();
  const auto p = relay_prompt();
  ForwardOptions fo;
  fo.trace = TraceLevel::attention;
  const auto r = forward(w, p.tokens, fo);
  // The answer position never attends to the key directly.
  CHECK(r.trace.attention[0][0].at(2, 0) < 1e-12);
  CHECK(r.trace.attention[1][0].at(2, 0) < 1e-12);
  CHECK(r.trace.attention[0][0].at(1, 0) > 0.99);
  const std::vector<TokenId> answer = {3};
  const std::vector<std::size_t> all = {0, 1};
  const auto d = prob_delta(w, p, answer, all);
  CHECK(d.unmasked > 0.5);
  CHECK(d.masked == doctest::Approx(1.0 / 8).epsilon(1e-6));
  CHECK(d.d > 0.3);
  // Cutting a route the model does not use changes nothing.
  const auto other = prob_delta(w, p, answer, all, ProbMode::geometric_mean, SpanRole::answer, SpanRole::query);
  CHECK(other.d == doctest::Approx(0).scale(1e-12));
}

TEST_CASE("intervention specs: JSON round trip, resolution and validation") {
  InterventionSpec cut;
  cut.stage = Stage::elicitation;
  const auto back = intervention_from_json(intervention_to_json(cut));
  CHECK(back.stage == Stage::elicitation);
  CHECK(back.resolve_layers(segment_quartile(8)) == std::vector<std::size_t>{2, 3});
  InterventionSpec explicit_layers;
  explicit_layers.layers = {0, 3};
  CHECK(intervention_from_json(intervention_to_json(explicit_layers)).layers == explicit_layers.layers);
  InterventionSpec deact;
  deact.kind = InterventionKind::neuron_deactivate;
  deact.neurons = {{0, 1}, {1, 5}};
  CHECK(intervention_from_json(intervention_to_json(deact)).neurons == deact.neurons);

  const auto cfg = tiny_config(2, 2, 16, 8);
  InterventionSpec bad_layer;
  bad_layer.layers = {2};
  CHECK_THROWS_AS(bad_layer.validate(cfg), ConfigError);
  InterventionSpec bad_neuron = deact;
  bad_neuron.neurons.insert({1, 8});
  CHECK_THROWS_AS(bad_neuron.validate(cfg), ConfigError);
  InterventionSpec mixed = cut;
  mixed.neurons = {{0, 0}};
  CHECK_THROWS_AS(mixed.validate(cfg), ConfigError);
  CHECK_NOTHROW(deact.validate(cfg));
  using nlohmann::json;
  CHECK_THROWS_AS(intervention_from_json(json{{"kind", "attention_cut"}, {"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(intervention_from_json(json{{"kind", "attention_cut"}, {"stage", "refinement"}, {"layers", {1}}}),
                  ConfigError);
  CHECK_THROWS_AS(intervention_from_json(json{{"kind", "nope"}}), ConfigError);
  CHECK_THROWS_AS(intervention_from_json(json{{"kind", "neuron_deactivate"}}), ConfigError);
}

TEST_CASE("deactivated evaluation matches the weight-surgery model example by example") {
  WorldParams wp;
  wp.n_entities = 12;
  wp.n_relations = 3;
  wp.objects_per_relation = 6;
  const auto world = generate_world(wp);
  const auto data = make_dataset(world, 3);
  const PromptSettings ps;
  const auto tok = world_tokenizer(world, ps);
  auto cfg = tiny_config(2, 2, 16, 32, tok.size(), 128);
  const auto w = random_model(cfg, 7);
  Rng rng(8);
  for (auto setting : {DocumentSetting::closed_book, DocumentSetting::gold, DocumentSetting::noisy}) {
    DeactivationSet set;
    while (set.size() < 6) set.insert({rng.below(2), rng.below(32)});
    const auto a = evaluate_with_deactivation(w, tok, data, set, setting, ps);
    const auto b = evaluate(zero_down_rows(w, set), tok, data, ps, EvalOptions{setting});
    REQUIRE(a.examples.size() == b.examples.size());
    for (std::size_t i = 0; i < a.examples.size(); ++i) CHECK(a.examples[i].prediction == b.examples[i].prediction);
    const auto none = evaluate_with_deactivation(w, tok, data, {}, setting, ps);
    const auto normal = evaluate(w, tok, data, ps, EvalOptions{setting});
    for (std::size_t i = 0; i < none.examples.size(); ++i) {
      CHECK(none.examples[i].prediction == normal.examples[i].prediction);
    }
    CHECK(none.em == normal.em);
  }
  DeactivationSet everything;
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t j = 0; j < 32; ++j) everything.insert({l, j});
  }
  const auto dead = evaluate_with_deactivation(w, tok, data, everything, DocumentSetting::gold, ps);
  CHECK(dead.examples.size() == data.size());
  CHECK(dead.em >= 0);
  CHECK(dead.intervention == "deactivate");
}
