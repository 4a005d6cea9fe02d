#include "raglab/analysis.h"

#include <cmath>

#include "raglab/error.h"

namespace raglab {

std::vector<QaExample> select_examples(const std::vector<QaExample>& data,
                                       std::string_view provenance, std::size_t limit) {
  if (provenance != "all") parse_split(provenance);
  std::vector<QaExample> out;
  for (const auto& ex : data) {
    if (provenance != "all" && ex.provenance != provenance) continue;
    out.push_back(ex);
    if (limit != 0 && out.size() == limit) break;
  }
  return out;
}

namespace {

bool spans_ready(const AssembledPrompt& p) {
  return p.key_found && !p.spans.key.empty() && !p.spans.context.empty() &&
         !p.spans.query.empty() && !p.spans.answer.empty();
}

}  // namespace

DatasetFlow dataset_flow(const ModelWeights& weights, const Tokenizer& tok,
                         const std::vector<QaExample>& data, Tier tier,
                         const PromptSettings& settings, const FlowSettings& flow) {
  DatasetFlow out;
  std::vector<FlowProfile> profiles;
  for (const auto& ex : data) {
    if (!ex.has_tier(tier) || !ex.passage_keys.contains(tier)) {
      ++out.skipped;
      continue;
    }
    const AssembledPrompt prompt = rag_prompt(tok, ex, {tier}, settings);
    const auto answer = answer_tokens(tok, ex.passage_keys.at(tier));
    if (!spans_ready(prompt) || answer.empty() ||
        prompt.tokens.size() + answer.size() - 1 > weights.config.max_seq) {
      ++out.skipped;
      continue;
    }
    profiles.push_back(flow_profile(weights, prompt, answer, flow));
  }
  out.used = profiles.size();
  if (profiles.empty()) {
    out.profile.convention = flow.convention;
    out.profile.normalization = flow.normalization;
    out.profile.n_layers = weights.config.n_layers;
    out.profile.n_examples = 0;
  } else {
    out.profile = mean_profile(profiles);
  }
  return out;
}

const HeatCell& Heatmap::cell(Stage s, Tier t) const {
  for (const auto& c : cells) {
    if (c.stage == s && c.tier == t) return c;
  }
  throw ContractError("heatmap has no cell for " + std::string(to_string(s)) + " / " +
                      std::string(to_string(t)));
}

Heatmap stage_heatmap(const ModelWeights& weights, const Tokenizer& tok,
                      const std::vector<QaExample>& data, const std::vector<Tier>& tiers,
                      const StageSegmentation& segmentation, ProbMode mode,
                      const PromptSettings& settings) {
  Heatmap h;
  h.segmentation = segmentation;
  h.mode = mode;
  h.tiers = tiers;
  std::vector<std::array<double, 4>> ext(tiers.size()), in(tiers.size());
  std::vector<std::size_t> counts(tiers.size(), 0);
  for (std::size_t t = 0; t < tiers.size(); ++t) {
    ext[t].fill(0);
    in[t].fill(0);
    for (const auto& ex : data) {
      if (!ex.has_tier(tiers[t]) || !ex.passage_keys.contains(tiers[t])) {
        ++h.skipped;
        continue;
      }
      const AssembledPrompt prompt = rag_prompt(tok, ex, {tiers[t]}, settings);
      const auto external = answer_tokens(tok, ex.passage_keys.at(tiers[t]));
      const auto internal = answer_tokens(tok, ex.answers.front());
      const std::size_t longest = std::max(external.size(), internal.size());
      if (!prompt.key_found || prompt.spans.key.empty() || prompt.spans.query.empty() ||
          external.empty() || internal.empty() ||
          prompt.tokens.size() + longest > weights.config.max_seq) {
        ++h.skipped;
        continue;
      }
      const auto de = stage_deltas(weights, prompt, external, segmentation, mode);
      const auto di = stage_deltas(weights, prompt, internal, segmentation, mode);
      for (int s = 0; s < 4; ++s) {
        ext[t][s] += de[s].d;
        in[t][s] += di[s].d;
      }
      ++counts[t];
    }
  }
  for (auto s : kAllStages) {
    for (std::size_t t = 0; t < tiers.size(); ++t) {
      HeatCell c;
      c.stage = s;
      c.tier = tiers[t];
      c.n = counts[t];
      if (counts[t] > 0) {
        c.d_external = ext[t][static_cast<int>(s)] / static_cast<double>(counts[t]);
        c.d_internal = in[t][static_cast<int>(s)] / static_cast<double>(counts[t]);
      }
      h.cells.push_back(c);
    }
  }
  return h;
}

LensReport logit_lens_report(const ModelWeights& weights, const Tokenizer& tok,
                             const std::vector<QaExample>& data, Tier tier,
                             const PromptSettings& settings) {
  LensReport r;
  r.tier = tier;
  const std::size_t L = weights.config.n_layers;
  std::vector<LensRow> acc(2 * L);
  for (std::size_t l = 0; l < L; ++l) {
    acc[2 * l] = {l, LensSource::post_mha, 0, 0, 0};
    acc[2 * l + 1] = {l, LensSource::post_mlp, 0, 0, 0};
  }
  NoGradGuard guard;
  for (const auto& ex : data) {
    if (!ex.has_tier(tier) || !ex.passage_keys.contains(tier)) {
      ++r.skipped;
      continue;
    }
    const auto internal = answer_tokens(tok, ex.answers.front());
    const auto external = answer_tokens(tok, ex.passage_keys.at(tier));
    std::size_t k = 0;
    while (k < internal.size() && k < external.size() && internal[k] == external[k]) ++k;
    if (k == internal.size() || k == external.size()) {
      ++r.skipped;  // one answer is a prefix of the other; no divergent token
      continue;
    }
    const AssembledPrompt prompt = rag_prompt(tok, ex, {tier}, settings);
    std::vector<TokenId> input = prompt.tokens;
    input.insert(input.end(), internal.begin(), internal.begin() + static_cast<std::ptrdiff_t>(k));
    if (input.size() > weights.config.max_seq) {
      ++r.skipped;
      continue;
    }
    ForwardOptions fo;
    fo.trace = TraceLevel::full;
    ForwardTrace trace;
    forward_hidden(weights, input, fo, &trace);
    const std::size_t pos = input.size() - 1;
    for (auto& row : acc) {
      const auto logits = logit_lens(weights, trace, pos, LensMode::cumulative, row.layer, row.source);
      const double li = static_cast<double>(logits[static_cast<std::size_t>(internal[k])]);
      const double le = static_cast<double>(logits[static_cast<std::size_t>(external[k])]);
      row.internal_logit += li;
      row.external_logit += le;
      row.internal_wins += li > le ? 1.0 : 0.0;
    }
    ++r.n;
  }
  if (r.n > 0) {
    for (auto& row : acc) {
      row.internal_logit /= static_cast<double>(r.n);
      row.external_logit /= static_cast<double>(r.n);
      row.internal_wins /= static_cast<double>(r.n);
    }
  }
  r.rows = std::move(acc);
  return r;
}

DeactivationStudy deactivation_study(const ModelWeights& weights, const Tokenizer& tok,
                                     const std::vector<QaExample>& data,
                                     const KnowledgeNeurons& neurons,
                                     const std::vector<DocumentSetting>& settings,
                                     Tier noisy_tier, const PromptSettings& prompts) {
  DeactivationStudy study;
  const DeactivationSet none;
  for (auto s : settings) {
    study.results.push_back(
        evaluate_with_deactivation(weights, tok, data, none, s, prompts, noisy_tier, "none"));
    study.results.push_back(evaluate_with_deactivation(weights, tok, data, neurons.ek, s, prompts,
                                                       noisy_tier, "deactivate_ek"));
    study.results.push_back(evaluate_with_deactivation(weights, tok, data, neurons.ik, s, prompts,
                                                       noisy_tier, "deactivate_ik"));
  }
  return study;
}

double sign_test_p(std::size_t plus, std::size_t minus) {
  const std::size_t n = plus + minus;
  if (n == 0) return 1.0;
  const std::size_t k = std::min(plus, minus);
  // P(X <= k) for X ~ Binomial(n, 1/2), via log-gamma for stability.
  double tail = 0;
  for (std::size_t i = 0; i <= k; ++i) {
    const double logp = std::lgamma(static_cast<double>(n) + 1) -
                        std::lgamma(static_cast<double>(i) + 1) -
                        std::lgamma(static_cast<double>(n - i) + 1) -
                        static_cast<double>(n) * std::log(2.0);
    tail += std::exp(logp);
  }
  return std::min(1.0, 2.0 * tail);
}

PairedChange follow_change(const EvalResult& before, const EvalResult& after) {
  if (before.examples.size() != after.examples.size()) {
    throw ContractError("follow_change: runs cover different examples");
  }
  PairedChange c;
  for (std::size_t i = 0; i < before.examples.size(); ++i) {
    if (before.examples[i].id != after.examples[i].id) {
      throw ContractError("follow_change: runs cover different examples");
    }
    const bool b = before.examples[i].follows_passage;
    const bool a = after.examples[i].follows_passage;
    if (!b && a) ++c.up;
    if (b && !a) ++c.down;
  }
  c.p_value = sign_test_p(c.up, c.down);
  return c;
}

}  // namespace raglab
