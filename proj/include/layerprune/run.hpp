#pragma once

#include "layerprune/accuracy_oracle.hpp"
#include "layerprune/latency_model.hpp"
#include "layerprune/search_engine.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace layerprune {

inline constexpr const char* kToolVersion = "0.1.0";

/// Every problem found while validating a run config.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct OracleConfig {
  enum class Kind { kSurrogate, kExternal } kind = Kind::kSurrogate;
  SurrogateParams surrogate;
  std::string command;
  int budget = 500;
  double timeout_s = 3600.0;
};

struct LatencyConfig {
  enum class Kind { kForest, kCostModel } kind = Kind::kForest;
  std::filesystem::path model_path;
  CostModelParams cost_model;
};

struct RunConfig {
  SpaceSpec space;
  SearchOptions search;
  OracleConfig oracle;
  LatencyConfig latency;
  bool cache = true;
  std::filesystem::path output_dir;
};

/// Parses and validates a run config. Relative paths resolve against
/// base_dir. Throws ConfigError listing every problem at once.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);
/// Fully resolved config, defaults included.
nlohmann::json to_json(const RunConfig& config);

std::unique_ptr<AccuracyOracle> make_oracle(const RunConfig& config);
std::unique_ptr<LatencyEstimator> make_latency_estimator(const RunConfig& config);

/// One history record: iteration, id, parent_id, config, predicted_latency_us,
/// auc, reward.
nlohmann::json candidate_to_json(const SpaceSpec& spec, const Candidate& c);

/// Appends one JSON line per candidate, flushed immediately.
class JsonlHistorySink final : public HistorySink {
 public:
  JsonlHistorySink(SpaceSpec spec, const std::filesystem::path& path);
  void on_candidate(const Candidate& c) override;

 private:
  SpaceSpec spec_;
  std::ofstream out_;
};

nlohmann::json report_to_json(const RunConfig& config, const SearchReport& report);
void write_stats_csv(std::ostream& os, std::span<const PopulationStats> stats);

/// Hex SHA-256 of a file's contents.
std::string file_sha256(const std::filesystem::path& path);

/// Runs a search from a config file, writing manifest.json, history.jsonl,
/// report.json and population_stats.csv into the output dir. Returns the
/// process exit code: 0 feasible model found, 2 infeasible, 1 error.
int execute_search(const std::filesystem::path& config_path, std::ostream& out, std::ostream& err);

struct ReportSeries {
  std::string label;
  std::vector<PopulationStats> stats;
};

ReportSeries load_report_series(const std::filesystem::path& report_path);

struct ComparisonTable {
  std::vector<std::string> labels;
  std::vector<int> iterations;
  /// rows[i][r] is the stats of report r at iterations[i].
  std::vector<std::vector<PopulationStats>> rows;
  bool truncated = false;
};

/// Aligns per-iteration population statistics, keeping iterations that are
/// multiples of `every` up to the shortest series.
ComparisonTable compare_reports(std::span<const ReportSeries> series, int every = 50);
void write_comparison_text(std::ostream& os, const ComparisonTable& table);
void write_comparison_csv(std::ostream& os, const ComparisonTable& table);

}  // namespace layerprune
