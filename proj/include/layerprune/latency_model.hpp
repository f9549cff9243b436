#pragma once

#include "layerprune/random_forest.hpp"
#include "layerprune/search_space.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace layerprune {

/// Dense-config latency of the reference deployment, used to calibrate the
/// synthetic cost model.
inline constexpr double kDenseLatencyUs = 3274.24;
inline constexpr double kDefaultMeasurementNoiseUs = 20.0;

struct LatencySample {
  SparsityConfig config;
  double latency_us = 0.0;
};

/// Affine latency in retained heads and FFN dims, plus Gaussian noise.
struct CostModelParams {
  double base_us = 0.0;
  std::vector<double> attn_us_per_head;
  std::vector<double> ffn_us_per_dim;
  double noise_sigma_us = 0.0;

  void validate(const SpaceSpec& spec) const;
};

/// Per-layer coefficients with mildly rising cost towards the output layers,
/// rescaled so the dense config costs exactly `dense_target_us`.
CostModelParams default_cost_model(const SpaceSpec& spec, double dense_target_us = kDenseLatencyUs,
                                   double noise_sigma_us = kDefaultMeasurementNoiseUs);

/// Noise-free latency of the cost model.
double cost_model_latency(const SpaceSpec& spec, const CostModelParams& params, const SparsityConfig& config);

/// One synthetic measurement; clamped to stay strictly positive.
double synth_measure(const SpaceSpec& spec, const CostModelParams& params, const SparsityConfig& config,
                     Rng& rng);

std::vector<LatencySample> generate_latency_samples(const SpaceSpec& spec, const CostModelParams& params,
                                                    int count, Rng& rng);

/// CSV with header `a1,f1,...,aL,fL,latency_us`.
void write_latency_samples(std::ostream& os, const SpaceSpec& spec, std::span<const LatencySample> samples);
/// Throws std::runtime_error naming the offending line number.
std::vector<LatencySample> read_latency_samples(std::istream& is, const SpaceSpec& spec);

/// Feature row: retained heads per layer, then retained FFN dims per layer.
Eigen::VectorXd latency_features(const SpaceSpec& spec, const SparsityConfig& config);

/// Anything that maps a config to a latency in microseconds.
class LatencyEstimator {
 public:
  virtual ~LatencyEstimator() = default;
  virtual double predict(const SparsityConfig& config) const = 0;
};

/// The noise-free cost model used directly as the latency source.
class CostModelEstimator final : public LatencyEstimator {
 public:
  CostModelEstimator(SpaceSpec spec, CostModelParams params);
  double predict(const SparsityConfig& config) const override;
  const CostModelParams& params() const { return params_; }

 private:
  SpaceSpec spec_;
  CostModelParams params_;
};

struct PredictorMetrics {
  double rmse_us = 0.0;
  double rmspe = 0.0;  // fraction, not percent
  int train_count = 0;
  int validation_count = 0;
  bool constant_target = false;
};

/// Random-forest latency predictor. Immutable after training.
class LatencyModel final : public LatencyEstimator {
 public:
  LatencyModel() = default;
  LatencyModel(SpaceSpec spec, RandomForest<double> forest, PredictorMetrics metrics);

  double predict(const SparsityConfig& config) const override;

  bool trained() const { return forest_.fitted(); }
  const SpaceSpec& spec() const { return spec_; }
  const PredictorMetrics& metrics() const { return metrics_; }
  const RandomForest<double>& forest() const { return forest_; }

  void save(std::ostream& os) const;
  static LatencyModel load(std::istream& is);
  void save(const std::filesystem::path& path) const;
  static LatencyModel load(const std::filesystem::path& path);

 private:
  SpaceSpec spec_;
  RandomForest<double> forest_;
  PredictorMetrics metrics_;
};

inline constexpr int kMinTrainingSamples = 100;

/// Shuffles, splits floor(split * n) rows into training and the rest into
/// validation, fits the forest and scores it on the validation rows.
LatencyModel train_predictor(const SpaceSpec& spec, std::span<const LatencySample> samples, double split,
                             Rng& rng, const ForestOptions& options = {});

}  // namespace layerprune
