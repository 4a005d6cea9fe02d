#pragma once

// Versioned CSV/JSON report files. Every file carries the schema tag and the
// hash of the resolved run configuration; CSV files carry them as leading
// '#' comment lines.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "raglab/analysis.h"
#include "raglab/flow.h"
#include "raglab/harness.h"
#include "raglab/kape.h"

namespace raglab {

inline constexpr std::string_view kReportSchema = "raglab/1";

struct ReportContext {
  nlohmann::json run_config = nlohmann::json::object();
  std::string config_hash;  // 16 hex digits

  static ReportContext from_config(const nlohmann::json& resolved);
  std::vector<std::string> csv_comments() const;
};

// FNV-1a 64 over the compact JSON dump (keys sorted by nlohmann::json).
std::string config_hash(const nlohmann::json& config);

// %.17g; non-finite values as nan/inf/-inf.
std::string format_real(double v);
std::string csv_escape(std::string_view field);

// Parses a CSV written by csv_text: skips '#' lines, returns header + rows.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> comments;
};
CsvTable parse_csv(std::string_view text);

std::string csv_text(const ReportContext& ctx, const std::vector<std::string>& header,
                     const std::vector<std::vector<std::string>>& rows);
nlohmann::json json_document(const ReportContext& ctx, std::string_view kind,
                             nlohmann::json payload);

// Files written through an OutputSet appear atomically (temp file + rename).
// Unless commit() is called, the destructor deletes every file it wrote.
class OutputSet {
 public:
  explicit OutputSet(std::filesystem::path dir);
  ~OutputSet();
  OutputSet(const OutputSet&) = delete;
  OutputSet& operator=(const OutputSet&) = delete;

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(std::string_view name) const { return dir_ / name; }
  void write_text(std::string_view name, std::string_view content);
  void write_json(std::string_view name, const nlohmann::json& j);
  // Registers a file produced by another writer so rollback covers it.
  void adopt(std::string_view name);
  void commit() { committed_ = true; }
  const std::vector<std::filesystem::path>& written() const { return written_; }

 private:
  std::filesystem::path dir_;
  std::vector<std::filesystem::path> written_;
  std::vector<std::filesystem::path> created_dirs_;
  bool committed_ = false;
};

// Report bodies. Each returns {csv text, json document}.
struct ReportPair {
  std::string csv;
  nlohmann::json json;
};

ReportPair flow_report(const ReportContext& ctx, const FlowProfile& profile, Tier tier,
                       std::size_t used, std::size_t skipped);
ReportPair stages_report(const ReportContext& ctx, const StageSegmentation& seg);
ReportPair heatmap_report(const ReportContext& ctx, const Heatmap& heatmap);
ReportPair eval_report(const ReportContext& ctx, const std::vector<EvalResult>& results);
ReportPair kape_report(const ReportContext& ctx, const KapeTable& table,
                       const KnowledgeNeurons& selection, PositionMode positions);
ReportPair lens_report(const ReportContext& ctx, const LensReport& lens);
ReportPair loss_report(const ReportContext& ctx, const std::vector<double>& losses);

}  // namespace raglab
