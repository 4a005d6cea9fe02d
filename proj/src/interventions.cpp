#include "raglab/interventions.h"

#include <cmath>

#include "raglab/error.h"

namespace raglab {

AdditiveMask build_attention_cut(const SpanMap& spans, std::span<const std::size_t> layers,
                                 std::size_t seq_len, SpanRole source, SpanRole target) {
  const auto& cols = spans.indices(source);
  const auto& rows = spans.indices(target);
  if (cols.empty() || rows.empty()) {
    throw EmptySpanError("attention cut " + std::string(to_string(source)) + " -> " +
                         std::string(to_string(target)) + ": span is empty");
  }
  AdditiveMask mask(seq_len);
  for (auto l : layers) {
    for (auto r : rows) {
      for (auto c : cols) mask.block(l, r, c);
    }
  }
  return mask;
}

std::string_view to_string(ProbMode m) {
  return m == ProbMode::geometric_mean ? "geometric_mean" : "joint";
}

ProbMode parse_prob_mode(std::string_view name) {
  if (name == "geometric_mean" || name == "geomean") return ProbMode::geometric_mean;
  if (name == "joint") return ProbMode::joint;
  throw ConfigError("unknown probability mode '" + std::string(name) + "'");
}

double sequence_probability(const SequenceProb& p, ProbMode mode) {
  return mode == ProbMode::geometric_mean ? p.geometric_mean : std::exp(p.joint_logprob);
}

ProbDelta prob_delta(const ModelWeights& weights, const AssembledPrompt& prompt,
                     std::span<const TokenId> answer, std::span<const std::size_t> layers,
                     ProbMode mode, SpanRole source, SpanRole target) {
  if (answer.empty()) throw ContractError("prob_delta: answer tokenizes to nothing");
  ProbDelta out;
  out.unmasked = sequence_probability(sequence_logprob(weights, prompt.tokens, answer), mode);
  if (layers.empty()) {
    out.masked = out.unmasked;
  } else {
    const AdditiveMask mask = build_attention_cut(prompt.spans, layers,
                                                  prompt.tokens.size() + answer.size(), source,
                                                  target);
    out.masked =
        sequence_probability(sequence_logprob(weights, prompt.tokens, answer, &mask), mode);
  }
  out.d = out.unmasked - out.masked;
  return out;
}

std::array<ProbDelta, 4> stage_deltas(const ModelWeights& weights, const AssembledPrompt& prompt,
                                      std::span<const TokenId> answer,
                                      const StageSegmentation& segmentation, ProbMode mode) {
  if (answer.empty()) throw ContractError("prob_delta: answer tokenizes to nothing");
  std::array<ProbDelta, 4> out;
  const double base = sequence_probability(sequence_logprob(weights, prompt.tokens, answer), mode);
  for (auto s : kAllStages) {
    const auto layers = segmentation.layers(s);
    ProbDelta& pd = out[static_cast<int>(s)];
    pd.unmasked = base;
    if (layers.empty()) {
      pd.masked = base;
    } else {
      const AdditiveMask mask =
          build_attention_cut(prompt.spans, layers, prompt.tokens.size() + answer.size());
      pd.masked =
          sequence_probability(sequence_logprob(weights, prompt.tokens, answer, &mask), mode);
    }
    pd.d = pd.unmasked - pd.masked;
  }
  return out;
}

std::vector<std::size_t> InterventionSpec::resolve_layers(
    const StageSegmentation& segmentation) const {
  if (stage) return segmentation.layers(*stage);
  return layers;
}

void InterventionSpec::validate(const ModelConfig& config) const {
  for (auto l : layers) {
    if (l >= config.n_layers) throw ConfigError("intervention layer " + std::to_string(l) + " out of range");
  }
  if (kind == InterventionKind::attention_cut) {
    if (!neurons.empty()) throw ConfigError("attention_cut spec must not list neurons");
  } else {
    if (!layers.empty() || stage) throw ConfigError("neuron_deactivate spec must not list layers");
    try {
      validate_deactivations(neurons, config);
    } catch (const RangeError& e) {
      throw ConfigError(e.what());
    }
  }
}

nlohmann::json intervention_to_json(const InterventionSpec& spec) {
  nlohmann::json j;
  if (spec.kind == InterventionKind::attention_cut) {
    j["kind"] = "attention_cut";
    if (spec.stage) {
      j["stage"] = std::string(to_string(*spec.stage));
    } else {
      j["layers"] = spec.layers;
    }
    j["source"] = std::string(to_string(spec.source));
    j["target"] = std::string(to_string(spec.target));
  } else {
    j["kind"] = "neuron_deactivate";
    nlohmann::json neurons = nlohmann::json::array();
    for (const auto& n : spec.neurons) neurons.push_back({n.layer, n.neuron});
    j["neurons"] = neurons;
  }
  return j;
}

InterventionSpec intervention_from_json(const nlohmann::json& j) {
  try {
    InterventionSpec spec;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "attention_cut") {
      spec.kind = InterventionKind::attention_cut;
      if (j.contains("stage")) spec.stage = parse_stage(j.at("stage").get<std::string>());
      if (j.contains("layers")) spec.layers = j.at("layers").get<std::vector<std::size_t>>();
      if (spec.stage && !spec.layers.empty()) {
        throw ConfigError("intervention names both a stage and explicit layers");
      }
      spec.source = parse_span_role(j.value("source", std::string("key")));
      spec.target = parse_span_role(j.value("target", std::string("query")));
      if (j.contains("neurons")) throw ConfigError("attention_cut spec must not list neurons");
    } else if (kind == "neuron_deactivate") {
      spec.kind = InterventionKind::neuron_deactivate;
      for (const auto& n : j.at("neurons")) {
        spec.neurons.insert({n.at(0).get<std::size_t>(), n.at(1).get<std::size_t>()});
      }
      if (j.contains("layers") || j.contains("stage")) {
        throw ConfigError("neuron_deactivate spec must not list layers");
      }
    } else {
      throw ConfigError("unknown intervention kind '" + kind + "'");
    }
    for (const auto& [key, value] : j.items()) {
      static const std::set<std::string> known = {"kind",   "stage",  "layers",
                                                  "source", "target", "neurons"};
      if (!known.contains(key)) throw ConfigError("unknown intervention field '" + key + "'");
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("intervention JSON: ") + e.what());
  }
}

EvalResult evaluate_with_deactivation(const ModelWeights& weights, const Tokenizer& tok,
                                      const std::vector<QaExample>& data,
                                      const DeactivationSet& deactivations,
                                      DocumentSetting setting, const PromptSettings& settings,
                                      Tier noisy_tier, const std::string& label) {
  EvalOptions opts;
  opts.setting = setting;
  opts.noisy_tier = noisy_tier;
  opts.deactivations = deactivations.empty() ? nullptr : &deactivations;
  opts.intervention = label;
  return evaluate(weights, tok, data, settings, opts);
}

ModelWeights zero_down_rows(const ModelWeights& weights, const DeactivationSet& neurons) {
  validate_deactivations(neurons, weights.config);
  ModelWeights out = weights.clone();
  const std::size_t d = weights.config.d_model;
  for (const auto& n : neurons) {
    auto data = out.layers[n.layer].w_down.mutable_data();
    for (std::size_t c = 0; c < d; ++c) data[n.neuron * d + c] = 0;
  }
  return out;
}

}  // namespace raglab
