#pragma once

#include "layerprune/accuracy_oracle.hpp"
#include "layerprune/controller.hpp"
#include "layerprune/latency_model.hpp"
#include "layerprune/search_space.hpp"

#include <cstdint>
#include <cmath>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace layerprune {

/// Target latency T and the exponent applied to LAT/T once T is exceeded.
struct RewardParams {
  double target_latency_us = 1900.0;
  double alpha = -1.0;

  void validate() const;
};

/// auc * (latency / T)^w with w = 0 when latency <= T and alpha otherwise.
/// Inside the budget the AUC is returned unchanged.
inline double reward(double auc, double latency_us, const RewardParams& params) {
  if (latency_us <= params.target_latency_us) return auc;
  return auc * std::pow(latency_us / params.target_latency_us, params.alpha);
}

struct Candidate {
  std::int64_t id = 0;
  SparsityConfig config;
  double auc = 0.0;
  double latency_us = 0.0;  // predicted
  double reward = 0.0;
  std::optional<std::int64_t> parent_id;
  int iteration = 0;
};

/// FIFO queue of at most `capacity` candidates; pushing into a full queue
/// evicts the oldest member.
class Population {
 public:
  explicit Population(int capacity);

  std::optional<Candidate> push(Candidate c);
  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(members_.size()); }
  bool full() const { return size() == capacity_; }
  const std::deque<Candidate>& members() const { return members_; }
  const Candidate& operator[](int i) const { return members_[i]; }

 private:
  int capacity_;
  std::deque<Candidate> members_;
};

enum class Algorithm { kReinforcedEa, kRandomEa, kRandomSearch };

const char* to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& name);

/// Raised when no config satisfies the initialization latency bound.
class InfeasibleConstraint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SearchOptions {
  Algorithm algorithm = Algorithm::kReinforcedEa;
  int total_models = 500;     // N
  int population_size = 50;   // P
  int sample_size = 50;       // S
  RewardParams reward;
  double relax = 1.15;
  std::int64_t max_init_attempts = 1'000'000;
  /// Redraw mutations whose child is already in the history.
  bool exhaustive_mode = false;
  int exhaustive_retries = 256;
  std::uint64_t seed = 0;
  ControllerOptions controller;

  void validate() const;
};

struct PopulationStats {
  int iteration = 0;
  double mean_reward = 0.0;
  double reward_variance = 0.0;
};

PopulationStats population_stats(const Population& population, int iteration);

struct SearchReport {
  std::optional<Candidate> final_model;
  std::vector<Candidate> history;
  std::vector<PopulationStats> stats;
};

/// Receives every candidate as soon as it is evaluated.
class HistorySink {
 public:
  virtual ~HistorySink() = default;
  virtual void on_candidate(const Candidate& c) = 0;
  virtual void on_stats(const PopulationStats&) {}
};

/// Draws min(S, P) members without replacement and returns the index of the
/// best by reward, then lower latency, then lower id.
int select_parent(const Population& population, int sample_size, Rng& rng);

/// Highest-AUC member with latency <= T; ties go to lower latency, then lower id.
std::optional<Candidate> select_final(std::span<const Candidate> history, double target_latency_us);

/// Uniform gene position, then a uniform candidate for that gene.
SparsityConfig random_mutate(const SpaceSpec& spec, const SparsityConfig& parent, Rng& rng);

/// Aging evolution with a reinforced or random mutator, or plain random
/// search. The loop is sequential: one child per iteration.
class SearchEngine {
 public:
  SearchEngine(SpaceSpec spec, SearchOptions options, AccuracyOracle& oracle, const LatencyEstimator& latency,
               HistorySink* sink = nullptr);

  /// Rejection-samples P configs with predicted latency <= relax * T.
  void initialize_population();
  /// One aging-evolution iteration; returns the child.
  Candidate evolve_step();
  /// Initialization plus N - P iterations and final selection.
  SearchReport run();

  const Population& population() const { return population_; }
  const std::vector<Candidate>& history() const { return history_; }
  const std::vector<PopulationStats>& stats() const { return stats_; }
  const Controller* controller() const { return controller_.get(); }
  int iteration() const { return iteration_; }

 private:
  Candidate evaluate(SparsityConfig config, std::optional<std::int64_t> parent_id);
  void record(const Candidate& c);

  SpaceSpec spec_;
  SearchOptions options_;
  AccuracyOracle& oracle_;
  const LatencyEstimator& latency_;
  HistorySink* sink_;
  Rng rng_;
  std::unique_ptr<Controller> controller_;
  Population population_;
  std::vector<Candidate> history_;
  std::unordered_set<SparsityConfig, SparsityConfigHash> seen_;
  std::vector<PopulationStats> stats_;
  std::int64_t next_id_ = 0;
  int iteration_ = 0;
  bool initialized_ = false;
};

}  // namespace layerprune
