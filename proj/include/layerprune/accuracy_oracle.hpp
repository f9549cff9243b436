#pragma once

#include "layerprune/search_space.hpp"

#include <chrono>
#include <cstdint>
#include <memory>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace layerprune {

enum class OracleSource { kSurrogate, kExternal, kCache };

const char* to_string(OracleSource source);

struct OracleResult {
  double auc = 0.0;  // fraction in (0, 1)
  OracleSource source = OracleSource::kSurrogate;
};

/// Source of AUC(m) for candidate configs.
class AccuracyOracle {
 public:
  virtual ~AccuracyOracle() = default;
  virtual OracleResult evaluate(const SparsityConfig& config) = 0;
};

/// Parameters of the synthetic AUC surface
///   auc = auc_max * prod_genes (1 - w * (1 - r)^c) + noise
/// where r is the retained fraction of a gene and w its importance.
struct SurrogateParams {
  std::vector<double> layer_importance_attn;
  std::vector<double> layer_importance_ffn;
  double auc_max = 0.8715;
  double curvature = 1.5;
  double noise_sigma = 0.0;

  void validate(const SpaceSpec& spec) const;
};

/// Importance weights fall off linearly with depth; deeper layers are
/// cheaper to prune.
SurrogateParams default_surrogate_params(const SpaceSpec& spec, double noise_sigma = 0.0);

/// Noise-free surrogate value.
double surrogate_auc_mean(const SpaceSpec& spec, const SurrogateParams& params, const SparsityConfig& config);

OracleResult surrogate_auc(const SpaceSpec& spec, const SurrogateParams& params, const SparsityConfig& config,
                           Rng& rng);

class SurrogateOracle final : public AccuracyOracle {
 public:
  SurrogateOracle(SpaceSpec spec, SurrogateParams params, std::uint64_t seed);
  OracleResult evaluate(const SparsityConfig& config) override;
  const SurrogateParams& params() const { return params_; }

 private:
  SpaceSpec spec_;
  SurrogateParams params_;
  Rng rng_;
};

/// Base of every failure talking to an external evaluator. All of them are
/// fatal to a search.
class EvaluatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class EvaluatorExited : public EvaluatorError {
 public:
  using EvaluatorError::EvaluatorError;
};
class EvaluatorTimeout : public EvaluatorError {
 public:
  using EvaluatorError::EvaluatorError;
};
class MalformedResponse : public EvaluatorError {
 public:
  MalformedResponse(const std::string& why, std::string raw)
      : EvaluatorError(why + ": " + raw), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};
class ProtocolMismatch : public EvaluatorError {
 public:
  using EvaluatorError::EvaluatorError;
};

struct ExternalOracleOptions {
  std::chrono::milliseconds timeout = std::chrono::hours(1);
  int budget = 500;
  std::int64_t first_request_id = 0;
};

/// Builds the request line (without trailing newline).
std::string make_evaluator_request(const SpaceSpec& spec, std::int64_t id, const SparsityConfig& config,
                                   int budget);
/// Validates a response line against the expected id and returns its AUC.
double parse_evaluator_response(const std::string& line, std::int64_t expected_id);

/// Delegates to a child process speaking line-delimited JSON on stdin/stdout.
/// One request is in flight at a time.
class ExternalOracle final : public AccuracyOracle {
 public:
  ExternalOracle(SpaceSpec spec, const std::string& command, ExternalOracleOptions options = {});
  ~ExternalOracle() override;
  ExternalOracle(const ExternalOracle&) = delete;
  ExternalOracle& operator=(const ExternalOracle&) = delete;

  OracleResult evaluate(const SparsityConfig& config) override;
  /// Same as evaluate but with an explicit evaluation-step budget.
  OracleResult external_auc(const SparsityConfig& config, int budget);

 private:
  std::string read_line();
  void shutdown();

  SpaceSpec spec_;
  ExternalOracleOptions options_;
  std::int64_t next_id_;
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

/// Memoizes another oracle by exact gene indices.
class CachedOracle final : public AccuracyOracle {
 public:
  explicit CachedOracle(std::unique_ptr<AccuracyOracle> inner);
  OracleResult evaluate(const SparsityConfig& config) override;

  std::int64_t hits() const;
  std::int64_t misses() const;
  std::size_t size() const;

 private:
  std::unique_ptr<AccuracyOracle> inner_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<SparsityConfig, double, SparsityConfigHash> table_;
  std::int64_t hits_ = 0;
  std::int64_t misses_ = 0;
};

}  // namespace layerprune
