#include "raglab/report.h"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "raglab/error.h"

namespace raglab {

std::string config_hash(const nlohmann::json& config) {
  const std::string text = config.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ReportContext ReportContext::from_config(const nlohmann::json& resolved) {
  return {resolved, raglab::config_hash(resolved)};
}

std::vector<std::string> ReportContext::csv_comments() const {
  return {"schema: " + std::string(kReportSchema), "config_hash: " + config_hash};
}

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

CsvTable parse_csv(std::string_view text) {
  CsvTable t;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, at_line_start = true, any = false;
  auto end_row = [&] {
    row.push_back(field);
    field.clear();
    if (t.header.empty()) {
      t.header = row;
    } else {
      t.rows.push_back(row);
    }
    row.clear();
    any = false;
    at_line_start = true;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (at_line_start && !quoted && c == '#') {
      const auto nl = text.find('\n', i);
      const auto stop = nl == std::string_view::npos ? text.size() : nl;
      std::string_view line = text.substr(i + 1, stop - i - 1);
      if (!line.empty() && line.front() == ' ') line.remove_prefix(1);
      t.comments.emplace_back(line);
      i = stop;
      continue;
    }
    at_line_start = false;
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(field);
      field.clear();
      any = true;
    } else if (c == '\n') {
      end_row();
    } else if (c != '\r') {
      field += c;
      any = true;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quoted field");
  if (any || !field.empty() || !row.empty()) end_row();
  return t;
}

std::string csv_text(const ReportContext& ctx, const std::vector<std::string>& header,
                     const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  for (const auto& c : ctx.csv_comments()) out += "# " + c + "\n";
  auto line = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ',';
      out += csv_escape(fields[i]);
    }
    out += '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out;
}

nlohmann::json json_document(const ReportContext& ctx, std::string_view kind,
                             nlohmann::json payload) {
  nlohmann::json doc = {{"schema", std::string(kReportSchema)},
                        {"kind", std::string(kind)},
                        {"config_hash", ctx.config_hash},
                        {"run_config", ctx.run_config}};
  for (auto& [k, v] : payload.items()) doc[k] = v;
  return doc;
}

OutputSet::OutputSet(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  for (auto p = dir_; !p.empty() && !std::filesystem::exists(p, ec); p = p.parent_path()) {
    created_dirs_.push_back(p);
    if (p == p.parent_path()) break;
  }
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw Error("cannot create output directory '" + dir_.string() + "': " + ec.message());
}

OutputSet::~OutputSet() {
  if (committed_) return;
  for (const auto& p : written_) {
    std::error_code ec;
    std::filesystem::remove(p, ec);
  }
  // Deepest first; a directory that still holds foreign files stays.
  for (const auto& d : created_dirs_) {
    std::error_code ec;
    std::filesystem::remove(d, ec);
  }
}

void OutputSet::write_text(std::string_view name, std::string_view content) {
  const auto final_path = dir_ / name;
  auto tmp = final_path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw Error("write failed for '" + final_path.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, final_path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error("cannot move report into place at '" + final_path.string() + "'");
  }
  adopt(name);
}

void OutputSet::write_json(std::string_view name, const nlohmann::json& j) {
  write_text(name, j.dump(1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n");
}

void OutputSet::adopt(std::string_view name) {
  const auto p = dir_ / name;
  if (std::find(written_.begin(), written_.end(), p) == written_.end()) written_.push_back(p);
}

namespace {

constexpr const char* kMetricPrefixes[] = {"attention_", "saliency_", "saliency_transposed_"};

}  // namespace

ReportPair flow_report(const ReportContext& ctx, const FlowProfile& p, Tier tier,
                       std::size_t used, std::size_t skipped) {
  std::vector<std::vector<std::string>> rows;
  const std::array<const std::array<std::vector<double>, 3>*, 3> groups = {
      &p.attention, &p.saliency, &p.saliency_transposed};
  for (std::size_t l = 0; l < p.n_layers; ++l) {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (auto d : kAllDirections) {
        const auto& curve = (*groups[g])[static_cast<int>(d)];
        if (curve.size() != p.n_layers) continue;
        rows.push_back({std::to_string(l), kMetricPrefixes[g] + std::string(to_string(d)),
                        format_real(curve[l]), std::string(to_string(p.convention)),
                        std::string(to_string(p.normalization))});
      }
    }
  }
  nlohmann::json payload = profile_to_json(p);
  payload["tier"] = std::string(to_string(tier));
  payload["examples_used"] = used;
  payload["examples_skipped"] = skipped;
  return {csv_text(ctx, {"layer", "metric", "value", "convention", "normalization"}, rows),
          json_document(ctx, "flow_profile", payload)};
}

ReportPair stages_report(const ReportContext& ctx, const StageSegmentation& seg) {
  std::vector<std::vector<std::string>> rows;
  for (auto s : kAllStages) {
    const auto [b, e] = seg.ranges[static_cast<int>(s)];
    rows.push_back({std::string(to_string(s)), std::to_string(b), std::to_string(e),
                    std::string(to_string(seg.method))});
  }
  return {csv_text(ctx, {"stage", "begin", "end", "method"}, rows),
          json_document(ctx, "stages", segmentation_to_json(seg))};
}

ReportPair heatmap_report(const ReportContext& ctx, const Heatmap& h) {
  std::vector<std::vector<std::string>> rows;
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : h.cells) {
    rows.push_back({std::string(to_string(c.stage)), std::string(to_string(c.tier)),
                    format_real(c.d_external), format_real(c.d_internal), std::to_string(c.n)});
    cells.push_back({{"stage", std::string(to_string(c.stage))},
                     {"tier", std::string(to_string(c.tier))},
                     {"d_external", c.d_external},
                     {"d_internal", c.d_internal},
                     {"n", c.n}});
  }
  nlohmann::json tiers = nlohmann::json::array();
  for (auto t : h.tiers) tiers.push_back(std::string(to_string(t)));
  nlohmann::json payload = {{"prob_mode", std::string(to_string(h.mode))},
                            {"segmentation", segmentation_to_json(h.segmentation)},
                            {"tiers", tiers},
                            {"examples_skipped", h.skipped},
                            {"cells", cells}};
  return {csv_text(ctx, {"stage", "tier", "d_external", "d_internal", "n"}, rows),
          json_document(ctx, "stage_heatmap", payload)};
}

ReportPair eval_report(const ReportContext& ctx, const std::vector<EvalResult>& results) {
  std::vector<std::vector<std::string>> rows;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : results) {
    rows.push_back({r.setting, r.intervention, std::to_string(r.examples.size()), format_real(r.em),
                    format_real(r.cem), format_real(r.f1), format_real(r.follow_rate)});
    arr.push_back(eval_to_json(r, true));
  }
  return {csv_text(ctx, {"setting", "intervention", "n", "em", "cem", "f1", "follow_rate"}, rows),
          json_document(ctx, "eval", {{"results", arr}})};
}

ReportPair kape_report(const ReportContext& ctx, const KapeTable& table,
                       const KnowledgeNeurons& selection, PositionMode positions) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(table.rows.size());
  for (const auto& r : table.rows) {
    rows.push_back({std::to_string(r.id.layer), std::to_string(r.id.neuron), format_real(r.raw_ik),
                    format_real(r.raw_ek), format_real(r.pair.p_ik), format_real(r.pair.p_ek),
                    format_real(r.kape), std::string(to_string(r.cls))});
  }
  nlohmann::json payload = kape_summary_json(table, selection);
  payload["positions"] = std::string(to_string(positions));
  return {csv_text(ctx, {"layer", "neuron", "raw_ik", "raw_ek", "p_ik", "p_ek", "kape", "class"},
                   rows),
          json_document(ctx, "kape_summary", payload)};
}

ReportPair lens_report(const ReportContext& ctx, const LensReport& lens) {
  std::vector<std::vector<std::string>> rows;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : lens.rows) {
    const std::string src = r.source == LensSource::post_mha ? "post_mha" : "post_mlp";
    rows.push_back({std::to_string(r.layer), src, format_real(r.internal_logit),
                    format_real(r.external_logit), format_real(r.internal_wins)});
    arr.push_back({{"layer", r.layer},
                   {"source", src},
                   {"internal_logit", r.internal_logit},
                   {"external_logit", r.external_logit},
                   {"internal_wins", r.internal_wins}});
  }
  nlohmann::json payload = {{"tier", std::string(to_string(lens.tier))},
                            {"token_choice", "first_divergent_token"},
                            {"mode", "cumulative"},
                            {"n", lens.n},
                            {"examples_skipped", lens.skipped},
                            {"rows", arr}};
  return {csv_text(ctx, {"layer", "source", "internal_logit", "external_logit", "internal_wins"},
                   rows),
          json_document(ctx, "logit_lens", payload)};
}

ReportPair loss_report(const ReportContext& ctx, const std::vector<double>& losses) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) rows.push_back({std::to_string(i), format_real(losses[i])});
  nlohmann::json payload = {{"steps", losses.size()},
                            {"final_loss", losses.empty() ? nlohmann::json(nullptr)
                                                          : nlohmann::json(losses.back())}};
  return {csv_text(ctx, {"step", "loss"}, rows), json_document(ctx, "train_summary", payload)};
}

}  // namespace raglab
