#include "raglab/kape.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "raglab/error.h"

namespace raglab {

std::string_view to_string(KnowledgeSetting s) {
  return s == KnowledgeSetting::closed_book_ik ? "closed_book_ik" : "rag_gold_ek";
}

std::string_view to_string(PositionMode m) {
  switch (m) {
    case PositionMode::answer_span: return "answer_span";
    case PositionMode::all: return "all";
    case PositionMode::generated: return "generated";
  }
  return "?";
}

PositionMode parse_position_mode(std::string_view name) {
  if (name == "answer_span" || name == "answer-span") return PositionMode::answer_span;
  if (name == "all") return PositionMode::all;
  if (name == "generated") return PositionMode::generated;
  throw ConfigError("unknown position mode '" + std::string(name) + "'");
}

double ActivationCounts::probability(std::size_t layer, std::size_t neuron) const {
  if (positions == 0) return 0;
  return static_cast<double>(active[layer * d_ff + neuron]) / static_cast<double>(positions);
}

std::vector<double> ActivationCounts::probabilities() const {
  std::vector<double> out(active.size(), 0.0);
  if (positions == 0) return out;
  for (std::size_t i = 0; i < active.size(); ++i) {
    out[i] = static_cast<double>(active[i]) / static_cast<double>(positions);
  }
  return out;
}

void ActivationCounts::merge(const ActivationCounts& other) {
  if (other.n_layers != n_layers || other.d_ff != d_ff) {
    throw DimensionError("activation counts: shape mismatch");
  }
  for (std::size_t i = 0; i < active.size(); ++i) active[i] += other.active[i];
  positions += other.positions;
  skipped_examples += other.skipped_examples;
}

void accumulate_activations(ActivationCounts& counts, const ForwardTrace& trace,
                            std::span<const std::size_t> rows) {
  if (trace.level != TraceLevel::full || trace.gate_activations.size() != counts.n_layers) {
    throw ContractError("activation counting needs a full trace");
  }
  for (std::size_t l = 0; l < counts.n_layers; ++l) {
    const Tensor& g = trace.gate_activations[l];
    if (g.cols() != counts.d_ff) throw DimensionError("gate activation width mismatch");
    const auto v = g.data();
    std::uint64_t* dst = counts.active.data() + l * counts.d_ff;
    for (auto r : rows) {
      if (r >= g.rows()) throw RangeError("activation row out of range");
      const Real* row = v.data() + r * counts.d_ff;
      for (std::size_t j = 0; j < counts.d_ff; ++j) dst[j] += row[j] > Real(0);
    }
  }
  counts.positions += rows.size();
}

ActivationCounts activation_probability(const ModelWeights& weights, const Tokenizer& tok,
                                        const std::vector<QaExample>& data,
                                        KnowledgeSetting setting, PositionMode positions,
                                        const PromptSettings& settings) {
  if (data.empty()) throw ContractError("activation_probability: empty dataset");
  const auto& c = weights.config;
  ActivationCounts counts;
  counts.n_layers = c.n_layers;
  counts.d_ff = c.d_ff;
  counts.active.assign(c.n_layers * c.d_ff, 0);
  NoGradGuard guard;
  for (const auto& ex : data) {
    AssembledPrompt prompt;
    if (setting == KnowledgeSetting::rag_gold_ek) {
      if (!ex.has_tier(Tier::positive)) {
        throw ContractError("example " + ex.id + " has no positive passage for the EK setting");
      }
      prompt = rag_prompt(tok, ex, {Tier::positive}, settings);
    } else {
      prompt = closed_book_prompt(tok, ex, settings);
    }
    std::vector<TokenId> answer;
    if (positions == PositionMode::generated) {
      GenerateOptions go;
      go.max_new = settings.max_new;
      go.stop_tokens = {Tokenizer::kEos, Tokenizer::kPad};
      answer = generate_greedy(weights, prompt.tokens, go);
    } else {
      answer = answer_tokens(tok, ex.answers.front());
    }
    const std::size_t p = prompt.tokens.size();
    if (positions != PositionMode::all && answer.empty()) {
      ++counts.skipped_examples;
      continue;
    }
    std::vector<TokenId> input = prompt.tokens;
    if (!answer.empty()) input.insert(input.end(), answer.begin(), answer.end() - 1);
    if (input.size() > c.max_seq) {
      ++counts.skipped_examples;
      continue;
    }
    std::vector<std::size_t> rows;
    const std::size_t first = positions == PositionMode::all ? 0 : p - 1;
    for (std::size_t r = first; r < input.size(); ++r) rows.push_back(r);
    ForwardOptions fo;
    fo.trace = TraceLevel::full;
    ForwardTrace trace;
    forward_hidden(weights, input, fo, &trace);
    accumulate_activations(counts, trace, rows);
  }
  return counts;
}

NormalizedPair normalize_pair(double raw_ik, double raw_ek) {
  const double total = raw_ik + raw_ek;
  if (!(total > 0)) return {0.5, 0.5, false};
  return {raw_ik / total, raw_ek / total, true};
}

double kape_score(double p_ik, double p_ek) {
  auto term = [](double p) { return p > 0 ? p * std::log(p) : 0.0; };
  const double h = -(term(p_ik) + term(p_ek));
  return std::clamp(h, 0.0, std::numbers::ln2);
}

std::string_view to_string(NeuronClass c) {
  switch (c) {
    case NeuronClass::none: return "none";
    case NeuronClass::ik: return "IK";
    case NeuronClass::ek: return "EK";
  }
  return "?";
}

KapeTable build_kape_table(std::size_t n_layers, std::size_t d_ff, std::span<const double> raw_ik,
                           std::span<const double> raw_ek) {
  if (raw_ik.size() != n_layers * d_ff || raw_ek.size() != n_layers * d_ff) {
    throw DimensionError("kape table: probability matrix shape mismatch");
  }
  KapeTable t;
  t.n_layers = n_layers;
  t.d_ff = d_ff;
  t.rows.reserve(raw_ik.size());
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t j = 0; j < d_ff; ++j) {
      KapeRow r;
      r.id = {l, j};
      r.raw_ik = raw_ik[l * d_ff + j];
      r.raw_ek = raw_ek[l * d_ff + j];
      if (!(r.raw_ik >= 0 && r.raw_ik <= 1 && r.raw_ek >= 0 && r.raw_ek <= 1)) {
        throw RangeError("activation probability outside [0, 1]");
      }
      r.pair = normalize_pair(r.raw_ik, r.raw_ek);
      r.kape = r.pair.defined ? kape_score(r.pair.p_ik, r.pair.p_ek) : std::numbers::ln2;
      t.rows.push_back(r);
    }
  }
  return t;
}

KapeTable build_kape_table(const ActivationCounts& ik, const ActivationCounts& ek) {
  if (ik.n_layers != ek.n_layers || ik.d_ff != ek.d_ff) {
    throw DimensionError("kape table: IK and EK counts disagree in shape");
  }
  const auto pi = ik.probabilities();
  const auto pe = ek.probabilities();
  return build_kape_table(ik.n_layers, ik.d_ff, pi, pe);
}

KnowledgeNeurons select_knowledge_neurons(KapeTable& table, double fraction, double min_raw) {
  if (!(fraction > 0 && fraction <= 1)) throw ConfigError("fraction must lie in (0, 1]");
  if (!(min_raw >= 0 && min_raw <= 1)) throw ConfigError("min_raw must lie in [0, 1]");
  KnowledgeNeurons out;
  out.fraction = fraction;
  out.min_raw = min_raw;
  for (auto& r : table.rows) r.cls = NeuronClass::none;
  const std::size_t n = table.rows.size();
  if (n == 0) return out;
  // Guard the ceiling against fraction·N landing a hair above an integer.
  const double raw_count = fraction * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(raw_count - 1e-9 * raw_count));
  k = std::clamp<std::size_t>(k, 1, n);
  out.candidates = k;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      const auto& ra = table.rows[a];
                      const auto& rb = table.rows[b];
                      if (ra.kape != rb.kape) return ra.kape < rb.kape;
                      return ra.id < rb.id;
                    });
  for (std::size_t i = 0; i < k; ++i) {
    auto& r = table.rows[order[i]];
    if (!r.pair.defined) continue;
    if (std::max(r.raw_ik, r.raw_ek) < min_raw) continue;
    if (r.raw_ik > r.raw_ek) {
      r.cls = NeuronClass::ik;
      out.ik.insert(r.id);
    } else if (r.raw_ek > r.raw_ik) {
      r.cls = NeuronClass::ek;
      out.ek.insert(r.id);
    }
  }
  return out;
}

void write_kape_csv(const KapeTable& table, const std::filesystem::path& path,
                    const std::vector<std::string>& header_comments) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& c : header_comments) out << "# " << c << '\n';
  out << "layer,neuron,raw_ik,raw_ek,p_ik,p_ek,kape,class\n";
  char buf[256];
  for (const auto& r : table.rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,", r.id.layer,
                  r.id.neuron, r.raw_ik, r.raw_ek, r.pair.p_ik, r.pair.p_ek, r.kape);
    out << buf << to_string(r.cls) << '\n';
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

nlohmann::json kape_summary_json(const KapeTable& table, const KnowledgeNeurons& selection) {
  auto ids = [](const DeactivationSet& s) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& n : s) a.push_back({n.layer, n.neuron});
    return a;
  };
  std::size_t undefined = 0;
  for (const auto& r : table.rows) undefined += !r.pair.defined;
  return {{"n_layers", table.n_layers},
          {"d_ff", table.d_ff},
          {"neurons", table.rows.size()},
          {"undefined_pairs", undefined},
          {"fraction", selection.fraction},
          {"min_raw", selection.min_raw},
          {"candidates", selection.candidates},
          {"counts", {{"IK", selection.ik.size()}, {"EK", selection.ek.size()},
                      {"none", table.rows.size() - selection.ik.size() - selection.ek.size()}}},
          {"ik_neurons", ids(selection.ik)},
          {"ek_neurons", ids(selection.ek)}};
}

}  // namespace raglab
