#include "layerprune/search_engine.hpp"

#include <algorithm>
#include <numeric>

namespace layerprune {

namespace {

// Stream-specific generator derived from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

bool better_parent(const Candidate& a, const Candidate& b) {
  if (a.reward != b.reward) return a.reward > b.reward;
  if (a.latency_us != b.latency_us) return a.latency_us < b.latency_us;
  return a.id < b.id;
}

}  // namespace

void RewardParams::validate() const {
  if (!(target_latency_us > 0.0) || !std::isfinite(target_latency_us)) {
    throw std::invalid_argument("target latency must be positive");
  }
  if (!(alpha <= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be nonpositive");
}

Population::Population(int capacity) : capacity_(capacity) {
  if (capacity <= 0) throw std::invalid_argument("population capacity must be positive");
}

std::optional<Candidate> Population::push(Candidate c) {
  std::optional<Candidate> evicted;
  if (full()) {
    evicted = std::move(members_.front());
    members_.pop_front();
  }
  members_.push_back(std::move(c));
  return evicted;
}

const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kReinforcedEa: return "reinforced_ea";
    case Algorithm::kRandomEa: return "random_ea";
    case Algorithm::kRandomSearch: return "random_search";
  }
  return "unknown";
}

Algorithm parse_algorithm(const std::string& name) {
  if (name == "reinforced_ea") return Algorithm::kReinforcedEa;
  if (name == "random_ea") return Algorithm::kRandomEa;
  if (name == "random_search") return Algorithm::kRandomSearch;
  throw std::invalid_argument("unknown algorithm '" + name +
                              "' (expected reinforced_ea, random_ea or random_search)");
}

void SearchOptions::validate() const {
  reward.validate();
  if (population_size < 1) throw std::invalid_argument("P must be at least 1");
  if (sample_size < 1) throw std::invalid_argument("S must be at least 1");
  if (total_models < population_size) throw std::invalid_argument("N must be at least P");
  if (!(relax >= 1.0)) throw std::invalid_argument("relax must be at least 1");
  if (max_init_attempts < 1) throw std::invalid_argument("initialization attempt budget must be positive");
  if (exhaustive_retries < 0) throw std::invalid_argument("exhaustive retries must be nonnegative");
  controller.validate();
}

PopulationStats population_stats(const Population& population, int iteration) {
  PopulationStats s;
  s.iteration = iteration;
  const int n = population.size();
  if (n == 0) return s;
  double sum = 0.0;
  for (const auto& c : population.members()) sum += c.reward;
  s.mean_reward = sum / n;
  double sq = 0.0;
  for (const auto& c : population.members()) sq += (c.reward - s.mean_reward) * (c.reward - s.mean_reward);
  s.reward_variance = sq / n;
  return s;
}

int select_parent(const Population& population, int sample_size, Rng& rng) {
  const int n = population.size();
  if (n == 0) throw std::logic_error("cannot select a parent from an empty population");
  const int k = std::min(sample_size, n);
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  int best = idx[0];
  for (int i = 1; i < k; ++i) {
    if (better_parent(population[idx[i]], population[best])) best = idx[i];
  }
  return best;
}

std::optional<Candidate> select_final(std::span<const Candidate> history, double target_latency_us) {
  const Candidate* best = nullptr;
  for (const auto& c : history) {
    if (!(c.latency_us <= target_latency_us)) continue;
    if (!best || c.auc > best->auc ||
        (c.auc == best->auc && (c.latency_us < best->latency_us ||
                                (c.latency_us == best->latency_us && c.id < best->id)))) {
      best = &c;
    }
  }
  if (!best) return std::nullopt;
  return *best;
}

SparsityConfig random_mutate(const SpaceSpec& spec, const SparsityConfig& parent, Rng& rng) {
  std::uniform_int_distribution<int> pos_dist(0, spec.num_genes() - 1);
  const int pos = pos_dist(rng);
  std::uniform_int_distribution<int> value_dist(0, spec.candidates_at(pos) - 1);
  return parent.with_gene(pos, value_dist(rng));
}

SearchEngine::SearchEngine(SpaceSpec spec, SearchOptions options, AccuracyOracle& oracle,
                           const LatencyEstimator& latency, HistorySink* sink)
    : spec_(spec),
      options_(options),
      oracle_(oracle),
      latency_(latency),
      sink_(sink),
      rng_(derive_seed(options.seed, 1)),
      population_(options.population_size) {
  spec_.validate();
  options_.validate();
  if (options_.algorithm == Algorithm::kReinforcedEa) {
    controller_ = std::make_unique<Controller>(spec_, options_.controller, derive_seed(options_.seed, 2));
  }
}

Candidate SearchEngine::evaluate(SparsityConfig config, std::optional<std::int64_t> parent_id) {
  Candidate c;
  c.id = next_id_++;
  c.latency_us = latency_.predict(config);
  c.auc = oracle_.evaluate(config).auc;
  c.reward = reward(c.auc, c.latency_us, options_.reward);
  c.parent_id = parent_id;
  c.iteration = iteration_;
  c.config = std::move(config);
  return c;
}

void SearchEngine::record(const Candidate& c) {
  history_.push_back(c);
  seen_.insert(c.config);
  if (sink_) sink_->on_candidate(c);
}

void SearchEngine::initialize_population() {
  if (initialized_) throw std::logic_error("population already initialized");
  const double bound = options_.relax * options_.reward.target_latency_us;
  std::int64_t attempts = 0;
  while (population_.size() < options_.population_size) {
    SparsityConfig config;
    while (true) {
      if (attempts++ >= options_.max_init_attempts) {
        throw InfeasibleConstraint("no config with predicted latency <= " + format_fraction(bound) +
                                   " us found in " + std::to_string(options_.max_init_attempts) +
                                   " attempts; the latency target is infeasible");
      }
      config = sample_uniform(spec_, rng_);
      if (latency_.predict(config) <= bound) break;
    }
    Candidate c = evaluate(std::move(config), std::nullopt);
    record(c);
    population_.push(std::move(c));
  }
  initialized_ = true;
  stats_.push_back(population_stats(population_, 0));
  if (sink_) sink_->on_stats(stats_.back());
}

Candidate SearchEngine::evolve_step() {
  if (!initialized_) throw std::logic_error("evolve_step before initialize_population");
  if (population_.size() != options_.population_size) {
    throw std::logic_error("population size " + std::to_string(population_.size()) + " != P");
  }
  ++iteration_;

  SparsityConfig child_config;
  std::optional<std::int64_t> parent_id;
  std::optional<MutationAction> action;
  SparsityConfig parent_config;

  const int attempts = options_.exhaustive_mode ? options_.exhaustive_retries + 1 : 1;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    if (options_.algorithm == Algorithm::kRandomSearch) {
      child_config = sample_uniform(spec_, rng_);
    } else {
      const Candidate& parent = population_[select_parent(population_, options_.sample_size, rng_)];
      parent_id = parent.id;
      parent_config = parent.config;
      if (options_.algorithm == Algorithm::kReinforcedEa) {
        action = controller_->forward_sample(parent_config, rng_);
        child_config = apply_mutation(spec_, parent_config, *action);
      } else {
        child_config = random_mutate(spec_, parent_config, rng_);
      }
    }
    if (!seen_.contains(child_config)) break;
  }

  Candidate child = evaluate(std::move(child_config), parent_id);
  if (action) controller_->reinforce_update(parent_config, *action, child.reward);
  population_.push(child);
  if (population_.size() != options_.population_size) {
    throw std::logic_error("population size invariant violated");
  }
  record(child);
  stats_.push_back(population_stats(population_, iteration_));
  if (sink_) sink_->on_stats(stats_.back());
  return child;
}

SearchReport SearchEngine::run() {
  initialize_population();
  for (int i = 0; i < options_.total_models - options_.population_size; ++i) evolve_step();
  SearchReport report;
  report.history = history_;
  report.stats = stats_;
  report.final_model = select_final(history_, options_.reward.target_latency_us);
  return report;
}

}  // namespace layerprune
