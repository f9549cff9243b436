#include "layerprune/latency_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace layerprune {

namespace {

constexpr const char* kModelMagic = "layerprune-latency-model";
constexpr int kModelVersion = 1;

double parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw std::invalid_argument("not a number: '" + std::string(s) + "'");
  }
  return v;
}

std::string expect_token(std::istream& is, const char* what) {
  std::string tok;
  if (!(is >> tok)) throw std::runtime_error(std::string("latency model truncated, expected ") + what);
  return tok;
}

}  // namespace

void CostModelParams::validate(const SpaceSpec& spec) const {
  if (attn_us_per_head.size() != static_cast<std::size_t>(spec.num_layers) ||
      ffn_us_per_dim.size() != static_cast<std::size_t>(spec.num_layers)) {
    throw std::invalid_argument("cost model needs one coefficient per layer");
  }
  auto negative = [](double v) { return !(v >= 0.0); };
  if (negative(base_us) || negative(noise_sigma_us) ||
      std::any_of(attn_us_per_head.begin(), attn_us_per_head.end(), negative) ||
      std::any_of(ffn_us_per_dim.begin(), ffn_us_per_dim.end(), negative)) {
    throw std::invalid_argument("cost model coefficients must be nonnegative");
  }
}

CostModelParams default_cost_model(const SpaceSpec& spec, double dense_target_us, double noise_sigma_us) {
  spec.validate();
  CostModelParams p;
  p.base_us = 0.25 * dense_target_us;
  p.noise_sigma_us = noise_sigma_us;
  double dense_variable = 0.0;
  for (int i = 0; i < spec.num_layers; ++i) {
    p.attn_us_per_head.push_back(60.0 + 2.0 * i);
    p.ffn_us_per_dim.push_back(0.36 + 0.01 * i);
    dense_variable += p.attn_us_per_head.back() * spec.num_heads + p.ffn_us_per_dim.back() * spec.ffn_dim;
  }
  const double scale = (dense_target_us - p.base_us) / dense_variable;
  for (auto& c : p.attn_us_per_head) c *= scale;
  for (auto& c : p.ffn_us_per_dim) c *= scale;
  return p;
}

double cost_model_latency(const SpaceSpec& spec, const CostModelParams& params, const SparsityConfig& config) {
  double lat = params.base_us;
  for (int i = 0; i < spec.num_layers; ++i) {
    const auto dims = retained_dims(spec, config, i);
    lat += params.attn_us_per_head[i] * dims.heads + params.ffn_us_per_dim[i] * dims.ffn;
  }
  return lat;
}

double synth_measure(const SpaceSpec& spec, const CostModelParams& params, const SparsityConfig& config,
                     Rng& rng) {
  double lat = cost_model_latency(spec, params, config);
  if (params.noise_sigma_us > 0.0) {
    std::normal_distribution<double> noise(0.0, params.noise_sigma_us);
    lat += noise(rng);
  }
  return std::max(lat, 1e-3);
}

std::vector<LatencySample> generate_latency_samples(const SpaceSpec& spec, const CostModelParams& params,
                                                    int count, Rng& rng) {
  params.validate(spec);
  if (count < 0) throw std::invalid_argument("sample count must be nonnegative");
  std::vector<LatencySample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    auto config = sample_uniform(spec, rng);
    const double lat = synth_measure(spec, params, config, rng);
    out.push_back({std::move(config), lat});
  }
  return out;
}

void write_latency_samples(std::ostream& os, const SpaceSpec& spec, std::span<const LatencySample> samples) {
  os << config_csv_header(spec) << ",latency_us\n";
  for (const auto& s : samples) {
    os << format_config(spec, s.config) << ',' << format_fraction(s.latency_us) << '\n';
  }
}

std::vector<LatencySample> read_latency_samples(std::istream& is, const SpaceSpec& spec) {
  const std::string expected = config_csv_header(spec) + ",latency_us";
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("line 1: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != expected) {
    throw std::runtime_error("line 1: bad header '" + line + "', expected '" + expected + "'");
  }
  std::vector<LatencySample> out;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      const auto last = line.rfind(',');
      if (last == std::string::npos) throw std::invalid_argument("missing latency column");
      LatencySample s;
      s.config = parse_config(spec, std::string_view(line).substr(0, last));
      s.latency_us = parse_double(std::string_view(line).substr(last + 1));
      if (!(s.latency_us > 0.0) || !std::isfinite(s.latency_us)) {
        throw std::invalid_argument("latency must be positive and finite");
      }
      out.push_back(std::move(s));
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

Eigen::VectorXd latency_features(const SpaceSpec& spec, const SparsityConfig& config) {
  Eigen::VectorXd f(2 * spec.num_layers);
  for (int i = 0; i < spec.num_layers; ++i) {
    const auto dims = retained_dims(spec, config, i);
    f(i) = dims.heads;
    f(spec.num_layers + i) = dims.ffn;
  }
  return f;
}

CostModelEstimator::CostModelEstimator(SpaceSpec spec, CostModelParams params)
    : spec_(spec), params_(std::move(params)) {
  params_.validate(spec_);
}

double CostModelEstimator::predict(const SparsityConfig& config) const {
  return cost_model_latency(spec_, params_, config);
}

LatencyModel::LatencyModel(SpaceSpec spec, RandomForest<double> forest, PredictorMetrics metrics)
    : spec_(spec), forest_(std::move(forest)), metrics_(metrics) {}

double LatencyModel::predict(const SparsityConfig& config) const {
  if (!trained()) throw std::logic_error("latency model is not trained");
  config.validate(spec_);
  return std::max(forest_.predict(latency_features(spec_, config)), 1e-3);
}

void LatencyModel::save(std::ostream& os) const {
  if (!trained()) throw std::logic_error("cannot save an untrained latency model");
  os << kModelMagic << ' ' << kModelVersion << '\n';
  os << "spec " << format_space_spec(spec_) << '\n';
  os << "metrics " << format_fraction(metrics_.rmse_us) << ' ' << format_fraction(metrics_.rmspe) << ' '
     << metrics_.train_count << ' ' << metrics_.validation_count << ' ' << (metrics_.constant_target ? 1 : 0)
     << '\n';
  os << "trees " << forest_.trees().size() << '\n';
  for (const auto& tree : forest_.trees()) {
    os << "tree " << tree.nodes().size() << '\n';
    for (const auto& n : tree.nodes()) {
      os << n.feature << ' ' << format_fraction(n.threshold) << ' ' << n.left << ' ' << n.right << ' '
         << format_fraction(n.value) << '\n';
    }
  }
}

LatencyModel LatencyModel::load(std::istream& is) {
  if (expect_token(is, "magic") != kModelMagic) throw std::runtime_error("not a latency model file");
  const int version = std::stoi(expect_token(is, "version"));
  if (version != kModelVersion) {
    throw std::runtime_error("unsupported latency model version " + std::to_string(version));
  }
  if (expect_token(is, "spec") != "spec") throw std::runtime_error("latency model: expected spec");
  const SpaceSpec spec = parse_space_spec(expect_token(is, "spec value"));
  if (expect_token(is, "metrics") != "metrics") throw std::runtime_error("latency model: expected metrics");
  PredictorMetrics m;
  m.rmse_us = parse_double(expect_token(is, "rmse"));
  m.rmspe = parse_double(expect_token(is, "rmspe"));
  m.train_count = std::stoi(expect_token(is, "train count"));
  m.validation_count = std::stoi(expect_token(is, "validation count"));
  m.constant_target = expect_token(is, "constant flag") == "1";
  if (expect_token(is, "trees") != "trees") throw std::runtime_error("latency model: expected trees");
  const long tree_count = std::stol(expect_token(is, "tree count"));
  std::vector<RegressionTree<double>> trees;
  const int feature_count = 2 * spec.num_layers;
  for (long t = 0; t < tree_count; ++t) {
    if (expect_token(is, "tree") != "tree") throw std::runtime_error("latency model: expected tree");
    const long node_count = std::stol(expect_token(is, "node count"));
    if (node_count <= 0) throw std::runtime_error("latency model: empty tree");
    std::vector<RegressionTree<double>::Node> nodes(node_count);
    for (auto& n : nodes) {
      n.feature = std::stoi(expect_token(is, "feature"));
      n.threshold = parse_double(expect_token(is, "threshold"));
      n.left = std::stoi(expect_token(is, "left"));
      n.right = std::stoi(expect_token(is, "right"));
      n.value = parse_double(expect_token(is, "value"));
      const bool leaf = n.feature < 0;
      if (!leaf && (n.feature >= feature_count || n.left <= 0 || n.right <= 0 || n.left >= node_count ||
                    n.right >= node_count)) {
        throw std::runtime_error("latency model: corrupt node");
      }
    }
    trees.emplace_back(std::move(nodes));
  }
  return LatencyModel(spec, RandomForest<double>(std::move(trees)), m);
}

void LatencyModel::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  save(os);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

LatencyModel LatencyModel::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open latency model " + path.string());
  try {
    return load(is);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

LatencyModel train_predictor(const SpaceSpec& spec, std::span<const LatencySample> samples, double split,
                             Rng& rng, const ForestOptions& options) {
  if (!(split > 0.0 && split < 1.0)) throw std::invalid_argument("split must lie in (0, 1)");
  const int n = static_cast<int>(samples.size());
  if (n < kMinTrainingSamples) {
    throw std::invalid_argument("need at least " + std::to_string(kMinTrainingSamples) +
                                " latency samples, got " + std::to_string(n));
  }
  const int train_n = static_cast<int>(std::floor(split * n + 1e-9));
  if (train_n < 1 || train_n >= n) throw std::invalid_argument("split leaves an empty partition");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  const int features = 2 * spec.num_layers;
  Eigen::MatrixXd x(train_n, features);
  Eigen::VectorXd y(train_n);
  for (int i = 0; i < train_n; ++i) {
    const auto& s = samples[order[i]];
    x.row(i) = latency_features(spec, s.config).transpose();
    y(i) = s.latency_us;
  }

  RandomForest<double> forest;
  forest.fit(x, y, options, rng());

  PredictorMetrics m;
  m.train_count = train_n;
  m.validation_count = n - train_n;
  m.constant_target = (y.maxCoeff() - y.minCoeff()) <= 1e-12 * std::abs(y.maxCoeff());
  double sq = 0.0, sq_pct = 0.0;
  for (int i = train_n; i < n; ++i) {
    const auto& s = samples[order[i]];
    const double pred = std::max(forest.predict(latency_features(spec, s.config)), 1e-3);
    const double err = pred - s.latency_us;
    sq += err * err;
    sq_pct += (err / s.latency_us) * (err / s.latency_us);
  }
  m.rmse_us = std::sqrt(sq / m.validation_count);
  m.rmspe = std::sqrt(sq_pct / m.validation_count);
  return LatencyModel(spec, std::move(forest), m);
}

}  // namespace layerprune
