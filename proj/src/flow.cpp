#include "raglab/flow.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "raglab/error.h"

namespace raglab {

std::string_view to_string(FlowConvention c) {
  return c == FlowConvention::source_first ? "source_first" : "literal";
}

std::string_view to_string(FlowNorm n) { return n == FlowNorm::raw ? "raw" : "mean"; }

FlowConvention parse_flow_convention(std::string_view name) {
  if (name == "source_first" || name == "source-first") return FlowConvention::source_first;
  if (name == "literal" || name == "literal-eq4" || name == "literal_eq4") {
    return FlowConvention::literal;
  }
  throw ConfigError("unknown flow convention '" + std::string(name) + "'");
}

FlowNorm parse_flow_norm(std::string_view name) {
  if (name == "raw") return FlowNorm::raw;
  if (name == "mean") return FlowNorm::mean;
  throw ConfigError("unknown flow normalization '" + std::string(name) + "'");
}

std::string_view to_string(FlowDirection d) {
  switch (d) {
    case FlowDirection::key_context: return "kc";
    case FlowDirection::key_query: return "kq";
    case FlowDirection::key_answer: return "ka";
  }
  return "?";
}

SpanRole target_role(FlowDirection d) {
  switch (d) {
    case FlowDirection::key_context: return SpanRole::context;
    case FlowDirection::key_query: return SpanRole::query;
    case FlowDirection::key_answer: return SpanRole::answer;
  }
  return SpanRole::context;
}

double flow_sum(std::span<const Tensor> matrices, std::span<const std::size_t> rows,
                std::span<const std::size_t> cols, FlowNorm norm) {
  if (rows.empty() || cols.empty()) throw EmptySpanError("flow over an empty span");
  double total = 0;
  for (const auto& m : matrices) {
    const std::size_t n = m.cols();
    const auto v = m.data();
    for (auto i : rows) {
      if (i >= m.rows()) throw RangeError("span index outside the attention matrix");
      const Real* row = v.data() + i * n;
      for (auto j : cols) {
        if (j >= n) throw RangeError("span index outside the attention matrix");
        if (i != j) total += static_cast<double>(row[j]);
      }
    }
  }
  if (norm == FlowNorm::mean) {
    total /= static_cast<double>(matrices.size() * rows.size() * cols.size());
  }
  return total;
}

namespace {

std::vector<double> per_layer_flow(const std::vector<std::vector<Tensor>>& per_layer,
                                   const SpanMap& spans, SpanRole source, SpanRole target,
                                   FlowNorm norm, FlowConvention convention) {
  const auto& src = spans.indices(source);
  const auto& dst = spans.indices(target);
  if (src.empty() || dst.empty()) {
    throw EmptySpanError("flow " + std::string(to_string(source)) + " -> " +
                         std::string(to_string(target)) + ": span is empty");
  }
  const auto& rows = convention == FlowConvention::source_first ? dst : src;
  const auto& cols = convention == FlowConvention::source_first ? src : dst;
  std::vector<double> out;
  out.reserve(per_layer.size());
  for (const auto& mats : per_layer) out.push_back(flow_sum(mats, rows, cols, norm));
  return out;
}

}  // namespace

std::vector<double> attention_flow(const ForwardTrace& trace, const SpanMap& spans,
                                   SpanRole source, SpanRole target, FlowNorm norm,
                                   FlowConvention convention) {
  if (trace.level == TraceLevel::none || trace.attention.empty()) {
    throw ContractError("attention_flow: trace holds no attention matrices");
  }
  return per_layer_flow(trace.attention, spans, source, target, norm, convention);
}

std::vector<double> saliency_flow(std::span<const Tensor> saliency, const SpanMap& spans,
                                  SpanRole source, SpanRole target, FlowNorm norm,
                                  FlowConvention convention) {
  std::vector<std::vector<Tensor>> per_layer;
  for (const auto& s : saliency) per_layer.push_back({s});
  return per_layer_flow(per_layer, spans, source, target, norm, convention);
}

std::vector<Tensor> saliency_from_trace(const ForwardTrace& trace, bool transpose) {
  if (trace.attention.empty()) throw ContractError("saliency: trace holds no attention matrices");
  std::vector<Tensor> out;
  for (const auto& heads : trace.attention) {
    const std::size_t n = heads.front().rows();
    std::vector<Real> s(n * n, Real(0));
    for (const auto& a : heads) {
      if (!a.has_grad()) {
        throw ContractError("saliency: attention gradients unavailable (run a differentiable "
                            "forward and backward first)");
      }
      const auto av = a.data();
      const auto g = a.grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const Real att = transpose ? av[j * n + i] : av[i * n + j];
          s[i * n + j] += std::abs(g[i * n + j] * att);
        }
      }
    }
    out.emplace_back(Shape{n, n}, std::move(s));
  }
  return out;
}

namespace {

ForwardTrace differentiable_trace(const ModelWeights& weights, std::span<const TokenId> prompt,
                                  std::span<const TokenId> answer, Real loss_scale) {
  if (prompt.empty()) throw ContractError("saliency: empty prompt");
  if (answer.empty()) throw ContractError("saliency: empty reference answer");
  if (!grad_enabled()) throw ContractError("saliency: gradient recording is disabled");
  std::vector<TokenId> input(prompt.begin(), prompt.end());
  input.insert(input.end(), answer.begin(), answer.end() - 1);
  ForwardOptions fo;
  fo.trace = TraceLevel::attention;
  fo.differentiable = true;
  ForwardTrace trace;
  const Tensor hidden = forward_hidden(weights, input, fo, &trace);
  const Tensor rows = slice(hidden, prompt.size() - 1, answer.size(), 0, hidden.cols());
  const Tensor logits = unembed(weights, rows);
  const std::vector<bool> mask(answer.size(), true);
  Tensor loss = cross_entropy(logits, answer, mask);
  if (loss_scale != Real(1)) loss = scale(loss, loss_scale);
  backward(loss);
  return trace;
}

}  // namespace

std::vector<Tensor> saliency_matrices(const ModelWeights& weights,
                                      std::span<const TokenId> prompt,
                                      std::span<const TokenId> reference_answer,
                                      const SaliencyOptions& options) {
  const ForwardTrace trace =
      differentiable_trace(weights, prompt, reference_answer, options.loss_scale);
  return saliency_from_trace(trace, options.transpose);
}

SaliencyPair saliency_both(const ModelWeights& weights, std::span<const TokenId> prompt,
                           std::span<const TokenId> reference_answer, Real loss_scale) {
  const ForwardTrace trace = differentiable_trace(weights, prompt, reference_answer, loss_scale);
  return {saliency_from_trace(trace, false), saliency_from_trace(trace, true)};
}

FlowProfile flow_profile(const ModelWeights& weights, const AssembledPrompt& prompt,
                         std::span<const TokenId> reference_answer,
                         const FlowSettings& settings) {
  FlowProfile p;
  p.convention = settings.convention;
  p.normalization = settings.normalization;
  p.n_layers = weights.config.n_layers;
  p.n_examples = 1;
  auto fill = [&](auto&& flow_fn, std::array<std::vector<double>, 3>& dst) {
    for (auto d : kAllDirections) {
      dst[static_cast<int>(d)] = flow_fn(SpanRole::key, target_role(d));
    }
  };
  if (settings.saliency) {
    const ForwardTrace trace = differentiable_trace(weights, prompt.tokens, reference_answer, 1);
    fill([&](SpanRole s, SpanRole t) {
      return attention_flow(trace, prompt.spans, s, t, settings.normalization, settings.convention);
    }, p.attention);
    const auto plain = saliency_from_trace(trace, false);
    const auto transposed = saliency_from_trace(trace, true);
    fill([&](SpanRole s, SpanRole t) {
      return saliency_flow(plain, prompt.spans, s, t, settings.normalization, settings.convention);
    }, p.saliency);
    fill([&](SpanRole s, SpanRole t) {
      return saliency_flow(transposed, prompt.spans, s, t, settings.normalization,
                           settings.convention);
    }, p.saliency_transposed);
  } else {
    NoGradGuard guard;
    ForwardOptions fo;
    fo.trace = TraceLevel::attention;
    ForwardTrace trace;
    forward_hidden(weights, prompt.tokens, fo, &trace);
    fill([&](SpanRole s, SpanRole t) {
      return attention_flow(trace, prompt.spans, s, t, settings.normalization, settings.convention);
    }, p.attention);
  }
  return p;
}

FlowProfile mean_profile(std::span<const FlowProfile> profiles) {
  if (profiles.empty()) throw ContractError("mean_profile: no profiles");
  FlowProfile out;
  const auto& first = profiles.front();
  out.convention = first.convention;
  out.normalization = first.normalization;
  out.n_layers = first.n_layers;
  std::size_t weight = 0;
  for (const auto& p : profiles) {
    if (p.n_layers != first.n_layers || p.convention != first.convention ||
        p.normalization != first.normalization) {
      throw ContractError("mean_profile: profiles disagree on layers or tags");
    }
    weight += p.n_examples;
  }
  auto average = [&](auto member) {
    std::array<std::vector<double>, 3> acc;
    for (int d = 0; d < 3; ++d) {
      bool present = true;
      for (const auto& p : profiles) present = present && (p.*member)[d].size() == first.n_layers;
      if (!present) continue;
      acc[d].assign(first.n_layers, 0.0);
      for (const auto& p : profiles) {
        for (std::size_t l = 0; l < first.n_layers; ++l) {
          acc[d][l] += (p.*member)[d][l] * static_cast<double>(p.n_examples);
        }
      }
      for (auto& v : acc[d]) v /= static_cast<double>(weight);
    }
    return acc;
  };
  out.attention = average(&FlowProfile::attention);
  out.saliency = average(&FlowProfile::saliency);
  out.saliency_transposed = average(&FlowProfile::saliency_transposed);
  out.n_examples = weight;
  return out;
}

nlohmann::json profile_to_json(const FlowProfile& p) {
  nlohmann::json curves = nlohmann::json::object();
  auto put = [&](const char* prefix, const std::array<std::vector<double>, 3>& arr) {
    for (auto d : kAllDirections) {
      const auto& v = arr[static_cast<int>(d)];
      if (!v.empty()) curves[std::string(prefix) + std::string(to_string(d))] = v;
    }
  };
  put("attention_", p.attention);
  put("saliency_", p.saliency);
  put("saliency_transposed_", p.saliency_transposed);
  return {{"convention", std::string(to_string(p.convention))},
          {"normalization", std::string(to_string(p.normalization))},
          {"n_layers", p.n_layers},
          {"n_examples", p.n_examples},
          {"curves", curves}};
}

FlowProfile profile_from_json(const nlohmann::json& j) {
  try {
    FlowProfile p;
    p.convention = parse_flow_convention(j.at("convention").get<std::string>());
    p.normalization = parse_flow_norm(j.at("normalization").get<std::string>());
    p.n_layers = j.at("n_layers").get<std::size_t>();
    p.n_examples = j.value("n_examples", std::size_t{1});
    const auto& curves = j.at("curves");
    auto get = [&](const char* prefix, std::array<std::vector<double>, 3>& arr) {
      for (auto d : kAllDirections) {
        const std::string key = std::string(prefix) + std::string(to_string(d));
        if (curves.contains(key)) arr[static_cast<int>(d)] = curves.at(key).get<std::vector<double>>();
      }
    };
    get("attention_", p.attention);
    get("saliency_", p.saliency);
    get("saliency_transposed_", p.saliency_transposed);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("flow profile JSON: ") + e.what());
  }
}

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::refinement: return "refinement";
    case Stage::elicitation: return "elicitation";
    case Stage::expression: return "expression";
    case Stage::contestation: return "contestation";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  for (auto s : kAllStages) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown stage '" + std::string(name) + "'");
}

std::string_view to_string(SegmentMethod m) {
  return m == SegmentMethod::quartile ? "quartile" : "changepoint";
}

SegmentMethod parse_segment_method(std::string_view name) {
  if (name == "quartile") return SegmentMethod::quartile;
  if (name == "changepoint") return SegmentMethod::changepoint;
  throw ConfigError("unknown stage method '" + std::string(name) + "'");
}

std::vector<std::size_t> StageSegmentation::layers(Stage s) const {
  const auto [b, e] = ranges[static_cast<int>(s)];
  std::vector<std::size_t> out;
  for (std::size_t l = b; l < e; ++l) out.push_back(l);
  return out;
}

StageSegmentation segment_quartile(std::size_t n_layers) {
  if (n_layers < 4) {
    throw RangeError("stage segmentation needs at least 4 layers, got " + std::to_string(n_layers));
  }
  StageSegmentation s;
  s.method = SegmentMethod::quartile;
  for (std::size_t k = 0; k < 4; ++k) s.ranges[k] = {k * n_layers / 4, (k + 1) * n_layers / 4};
  return s;
}

double segment_sse(std::span<const double> curve, std::size_t begin, std::size_t end) {
  if (end <= begin) return 0;
  double mean = 0;
  for (std::size_t i = begin; i < end; ++i) mean += curve[i];
  mean /= static_cast<double>(end - begin);
  double sse = 0;
  for (std::size_t i = begin; i < end; ++i) sse += (curve[i] - mean) * (curve[i] - mean);
  return sse;
}

StageSegmentation segment_changepoint(std::span<const double> curve) {
  const std::size_t n = curve.size();
  if (n < 4) throw RangeError("stage segmentation needs at least 4 layers, got " + std::to_string(n));
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // best[k][e]: minimal cost of splitting [0, e) into k + 1 segments.
  std::vector<std::vector<double>> best(4, std::vector<double>(n + 1, kInf));
  std::vector<std::vector<std::size_t>> from(4, std::vector<std::size_t>(n + 1, 0));
  for (std::size_t e = 1; e <= n; ++e) best[0][e] = segment_sse(curve, 0, e);
  for (std::size_t k = 1; k < 4; ++k) {
    for (std::size_t e = k + 1; e <= n; ++e) {
      for (std::size_t b = k; b < e; ++b) {
        const double cost = best[k - 1][b] + segment_sse(curve, b, e);
        if (cost < best[k][e]) {
          best[k][e] = cost;
          from[k][e] = b;
        }
      }
    }
  }
  StageSegmentation s;
  s.method = SegmentMethod::changepoint;
  std::size_t end = n;
  for (int k = 3; k >= 0; --k) {
    const std::size_t begin = k == 0 ? 0 : from[k][end];
    s.ranges[k] = {begin, end};
    end = begin;
  }
  return s;
}

StageSegmentation segment_stages(const FlowProfile& profile, SegmentMethod method) {
  if (method == SegmentMethod::quartile) return segment_quartile(profile.n_layers);
  const auto& kq = profile.attention[static_cast<int>(FlowDirection::key_query)];
  if (kq.size() != profile.n_layers) throw ContractError("profile lacks the key->query curve");
  return segment_changepoint(kq);
}

nlohmann::json segmentation_to_json(const StageSegmentation& s) {
  nlohmann::json stages = nlohmann::json::array();
  for (auto st : kAllStages) {
    const auto [b, e] = s.ranges[static_cast<int>(st)];
    stages.push_back({{"stage", std::string(to_string(st))}, {"begin", b}, {"end", e}});
  }
  return {{"method", std::string(to_string(s.method))}, {"stages", stages}};
}

}  // namespace raglab
