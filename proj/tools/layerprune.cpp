// layerprune: latency-constrained layer-wise sparsity search.
//
//   layerprune gen-latency   --count 5000 --seed 1 --out samples.csv
//   layerprune train-latency --samples samples.csv --out latency.model
//   layerprune search        --config run.json
//   layerprune compare       --reports a/report.json b/report.json

#include "layerprune/latency_model.hpp"
#include "layerprune/run.hpp"
#include "layerprune/search_space.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace layerprune;

namespace {

int gen_latency(const std::string& spec_text, int count, std::uint64_t seed, const fs::path& out_path,
                double noise, double dense_us) {
  const SpaceSpec spec = parse_space_spec(spec_text);
  if (count < 0) throw std::invalid_argument("--count must be nonnegative");
  if (!(noise >= 0.0)) throw std::invalid_argument("--noise must be nonnegative");
  const CostModelParams params = default_cost_model(spec, dense_us, noise);
  Rng rng(seed);
  const auto samples = generate_latency_samples(spec, params, count, rng);
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("cannot open " + out_path.string() + " for writing");
  write_latency_samples(os, spec, samples);
  if (!os) throw std::runtime_error("write failed: " + out_path.string());
  std::cout << "wrote " << samples.size() << " samples to " << out_path.string() << '\n';
  return 0;
}

int train_latency(const std::string& spec_text, const fs::path& samples_path, double split, std::uint64_t seed,
                  const fs::path& out_path) {
  const SpaceSpec spec = parse_space_spec(spec_text);
  if (!(split > 0.0 && split < 1.0)) throw std::invalid_argument("--split must lie in (0, 1)");
  std::ifstream is(samples_path);
  if (!is) throw std::runtime_error("cannot open samples file " + samples_path.string());
  std::vector<LatencySample> samples;
  try {
    samples = read_latency_samples(is, spec);
  } catch (const std::exception& e) {
    throw std::runtime_error(samples_path.string() + ": " + e.what());
  }
  Rng rng(seed);
  const LatencyModel model = train_predictor(spec, samples, split, rng);
  model.save(out_path);
  const auto& m = model.metrics();
  std::cout << "train rows: " << m.train_count << ", validation rows: " << m.validation_count << '\n'
            << "RMSE: " << std::fixed << std::setprecision(2) << m.rmse_us << " us\n"
            << "RMSPE: " << std::setprecision(3) << 100.0 * m.rmspe << " %\n";
  if (m.constant_target) std::cout << "warning: latency targets are constant; the model predicts one value\n";
  std::cout << "model written to " << out_path.string() << '\n';
  return 0;
}

int compare(const std::vector<std::string>& paths, int every, const std::string& csv_path) {
  if (paths.size() < 2) throw std::invalid_argument("compare needs at least two --reports");
  std::vector<ReportSeries> series;
  for (const auto& p : paths) series.push_back(load_report_series(p));
  const auto table = compare_reports(series, every);
  if (table.truncated) std::cerr << "warning: reports differ in length; truncated to the shortest\n";
  write_comparison_text(std::cout, table);
  if (!csv_path.empty()) {
    std::ofstream os(csv_path);
    if (!os) throw std::runtime_error("cannot open " + csv_path + " for writing");
    write_comparison_csv(os, table);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latency-constrained layer-wise sparsity search"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  std::string spec_text = "4,4,1024,100";
  int count = 0;
  std::uint64_t seed = 0;
  std::string out_path, samples_path, config_path, csv_path;
  double noise = kDefaultMeasurementNoiseUs, dense_us = kDenseLatencyUs, split = 0.8;
  int every = 50;
  std::vector<std::string> reports;

  auto* gen = app.add_subcommand("gen-latency", "Generate synthetic latency measurements");
  gen->add_option("--spec", spec_text, "layers,heads,ffn_dim,ffn_steps")->capture_default_str();
  gen->add_option("--count", count, "Number of samples")->required();
  gen->add_option("--seed", seed, "Random seed")->capture_default_str();
  gen->add_option("--out", out_path, "Output CSV")->required();
  gen->add_option("--noise", noise, "Measurement noise sigma (us)")->capture_default_str();
  gen->add_option("--dense-latency", dense_us, "Calibrated dense latency (us)")->capture_default_str();

  auto* train = app.add_subcommand("train-latency", "Train the random-forest latency predictor");
  train->add_option("--spec", spec_text, "layers,heads,ffn_dim,ffn_steps")->capture_default_str();
  train->add_option("--samples", samples_path, "Latency sample CSV")->required();
  train->add_option("--split", split, "Training fraction")->capture_default_str();
  train->add_option("--seed", seed, "Random seed")->capture_default_str();
  train->add_option("--out", out_path, "Model output path")->required();

  auto* search = app.add_subcommand("search", "Run a sparsity search");
  search->add_option("--config", config_path, "Run config (JSON)")->required();

  auto* cmp = app.add_subcommand("compare", "Compare population reward traces of several runs");
  cmp->add_option("--reports", reports, "report.json files")->required()->expected(1, -1);
  cmp->add_option("--every", every, "Checkpoint spacing in iterations")->capture_default_str();
  cmp->add_option("--csv", csv_path, "Also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return gen_latency(spec_text, count, seed, out_path, noise, dense_us);
    if (*train) return train_latency(spec_text, samples_path, split, seed, out_path);
    if (*search) return execute_search(config_path, std::cout, std::cerr);
    if (*cmp) return compare(reports, every, csv_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
