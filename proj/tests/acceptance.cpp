// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include "layerprune/accuracy_oracle.hpp"
#include "layerprune/controller.hpp"
#include "layerprune/latency_model.hpp"
#include "layerprune/pruning_mask.hpp"
#include "layerprune/search_engine.hpp"
#include "layerprune/search_space.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace layerprune;

namespace {

const SpaceSpec kSpec{};
constexpr double kTarget = 1900.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1. Reward branch structure over random tuples.
Outcome reward_exactness() {
  Rng rng(101);
  std::uniform_real_distribution<double> auc(1e-6, 1.0 - 1e-6), target(10.0, 10000.0), scale(0.05, 3.0),
      alpha(-3.0, 0.0);
  int under = 0, over = 0, bad = 0;
  double worst = 0.0;
  for (int i = 0; i < 100'000; ++i) {
    const RewardParams p{target(rng), alpha(rng)};
    const double a = auc(rng);
    // Every 16th tuple sits exactly on the boundary.
    const double lat = i % 16 == 0 ? p.target_latency_us : p.target_latency_us * scale(rng);
    const double r = reward(a, lat, p);
    if (lat <= p.target_latency_us) {
      ++under;
      if (std::memcmp(&r, &a, sizeof r) != 0) ++bad;
    } else {
      ++over;
      const double expect = a * std::pow(lat / p.target_latency_us, p.alpha);
      const double rel = std::abs(r - expect) / std::abs(expect);
      worst = std::max(worst, rel);
      if (!(rel <= 1e-12)) ++bad;
      if (p.alpha < 0.0 && !(r < a)) ++bad;
    }
  }
  return {bad == 0, fmt("%d within-budget tuples bitwise, %d over-budget, max rel err %.1e, %d violations", under,
                        over, worst, bad)};
}

// 2. Reinforced EA finds the exhaustive optimum of a 64-config space.
Outcome brute_force_optimality() {
  const SpaceSpec tiny{2, 2, 64, 4};
  const SurrogateParams sp = default_surrogate_params(tiny);
  const CostModelEstimator latency(tiny, default_cost_model(tiny, kDenseLatencyUs, 0.0));
  const double target = 0.75 * kDenseLatencyUs;

  std::optional<SparsityConfig> best;
  double best_auc = 0.0, best_lat = 0.0;
  int feasible = 0;
  for_each_config(tiny, [&](const SparsityConfig& c) {
    const double lat = latency.predict(c);
    if (lat > target) return;
    ++feasible;
    const double a = surrogate_auc_mean(tiny, sp, c);
    if (!best || a > best_auc || (a == best_auc && lat < best_lat)) {
      best = c;
      best_auc = a;
      best_lat = lat;
    }
  });
  if (!best) return {false, "no feasible config in the tiny space"};

  int hits = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    CachedOracle oracle(std::make_unique<SurrogateOracle>(tiny, sp, seed));
    SearchOptions o;
    o.algorithm = Algorithm::kReinforcedEa;
    o.total_models = 64;
    o.population_size = 8;
    o.sample_size = 8;
    o.reward = {target, -1.0};
    o.seed = seed;
    SearchEngine engine(tiny, o, oracle, latency);
    const SearchReport r = engine.run();
    hits += r.final_model && r.final_model->config == *best;
  }
  return {hits >= 9, fmt("%d/10 seeds returned the optimum (%d of 64 configs feasible)", hits, feasible)};
}

// 3. Analytic log-prob gradients against central differences. Each
// parameter group is compared as a vector, ||fd - analytic|| / max norm.
Outcome gradient_check() {
  ControllerOptions o;
  o.embed_dim = 8;
  o.encoder_hidden = 8;
  o.mutator_hidden = 8;
  Controller c(kSpec, o, 303);
  Rng rng(304);
  double worst = 0.0, worst_entry = 0.0;
  std::string worst_group;
  std::int64_t checked = 0;
  for (int trial = 0; trial < 4; ++trial) {
    const SparsityConfig parent = sample_uniform(kSpec, rng);
    const MutationAction a = c.forward_sample(parent, rng);
    const ControllerParams grad = c.log_prob_gradient(parent, a);
    visit_tensors(
        [&](const std::string& name, auto& p, const auto& g) {
          double diff2 = 0.0, fd2 = 0.0, an2 = 0.0;
          for (Eigen::Index k = 0; k < p.size(); ++k) {
            const double saved = p.data()[k];
            p.data()[k] = saved + 1e-5;
            const double up = c.log_prob(parent, a);
            p.data()[k] = saved - 1e-5;
            const double down = c.log_prob(parent, a);
            p.data()[k] = saved;
            const double fd = (up - down) / 2e-5;
            const double an = g.data()[k];
            diff2 += (fd - an) * (fd - an);
            fd2 += fd * fd;
            an2 += an * an;
            worst_entry = std::max(worst_entry, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
            ++checked;
          }
          const double scale = std::sqrt(std::max(fd2, an2));
          const double rel = scale > 0.0 ? std::sqrt(diff2) / scale : std::sqrt(diff2);
          if (rel > worst) {
            worst = rel;
            worst_group = name;
          }
        },
        c.mutable_params(), grad);
  }
  return {worst <= 1e-4, fmt("%lld partials, max group rel err %.2e (%s), max entrywise %.2e",
                             static_cast<long long>(checked), worst, worst_group.c_str(), worst_entry)};
}

// 4. Bandit: reward 1 only for mutating gene k.
Outcome bandit() {
  int total_pass = 0;
  std::string per_gene;
  for (int k = 0; k < kSpec.num_genes(); ++k) {
    int passed = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      Controller c(kSpec, {}, seed * 1000 + k);
      Rng rng(seed * 7919 + k);
      const SparsityConfig parent = sample_uniform(kSpec, rng);
      bool reached = false;
      for (int step = 0; step < 2000 && !reached; ++step) {
        const MutationAction a = c.forward_sample(parent, rng);
        c.reinforce_update(parent, a, a.layer_pos == k ? 1.0 : 0.0);
        reached = c.layer_probabilities(parent)(k) > 0.9;
      }
      passed += reached;
    }
    total_pass += passed >= 9;
    per_gene += fmt("%s%d", k ? "," : "", passed);
  }
  return {total_pass == kSpec.num_genes(), "seeds reaching p>0.9 per gene: " + per_gene};
}

LatencyModel trained_predictor(PredictorMetrics* metrics) {
  Rng gen(505);
  const auto samples =
      generate_latency_samples(kSpec, default_cost_model(kSpec, kDenseLatencyUs, kDefaultMeasurementNoiseUs), 5000, gen);
  Rng split(506);
  LatencyModel m = train_predictor(kSpec, samples, 0.8, split);
  if (metrics) *metrics = m.metrics();
  return m;
}

// 5. Forest predictor quality on noisy synthetic measurements.
Outcome predictor_quality(const PredictorMetrics& m) {
  return {m.rmspe <= 0.05, fmt("validation RMSPE %.3f%%, RMSE %.1f us on %d/%d rows", 100.0 * m.rmspe, m.rmse_us,
                               m.train_count, m.validation_count)};
}

SearchReport search(Algorithm alg, std::uint64_t seed, double alpha, const LatencyEstimator& latency) {
  CachedOracle oracle(std::make_unique<SurrogateOracle>(kSpec, default_surrogate_params(kSpec), seed));
  SearchOptions o;
  o.algorithm = alg;
  o.total_models = 500;
  o.population_size = 50;
  o.sample_size = 50;
  o.reward = {kTarget, alpha};
  o.seed = seed;
  SearchEngine engine(kSpec, o, oracle, latency);
  return engine.run();
}

// 6. Reinforced vs random-mutation EA population mean reward.
Outcome search_efficiency(const LatencyEstimator& latency) {
  double reinforced300 = 0, random300 = 0, reinforced450 = 0, random450 = 0;
  const int seeds = 5;
  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    const SearchReport a = search(Algorithm::kReinforcedEa, seed, -1.0, latency);
    const SearchReport b = search(Algorithm::kRandomEa, seed, -1.0, latency);
    reinforced300 += a.stats.at(300).mean_reward / seeds;
    reinforced450 += a.stats.at(450).mean_reward / seeds;
    random300 += b.stats.at(300).mean_reward / seeds;
    random450 += b.stats.at(450).mean_reward / seeds;
  }
  return {reinforced300 >= random300 && reinforced450 >= random450,
          fmt("mean reward @300 %.4f vs %.4f, @450 %.4f vs %.4f (reinforced vs random)", reinforced300, random300,
              reinforced450, random450)};
}

// 7. Final-model AUC across reward exponents.
Outcome alpha_robustness(const LatencyEstimator& latency) {
  std::string detail;
  bool pass = true;
  for (Algorithm alg : {Algorithm::kReinforcedEa, Algorithm::kRandomEa}) {
    double lo = 1.0, hi = 0.0;
    for (double alpha : {-0.3, -0.7, -1.0}) {
      const SearchReport r = search(alg, 1, alpha, latency);
      if (!r.final_model) return {false, "no feasible final model"};
      lo = std::min(lo, r.final_model->auc);
      hi = std::max(hi, r.final_model->auc);
    }
    pass = pass && hi - lo <= 0.005;
    detail += fmt("%s%s AUC %.4f..%.4f (spread %.4f)", detail.empty() ? "" : "; ", to_string(alg), lo, hi, hi - lo);
  }
  return {pass, detail};
}

// 8. Aging, feasibility and determinism for all algorithms.
Outcome aging_invariants(const LatencyEstimator& latency) {
  int violations = 0, runs = 0;
  for (Algorithm alg : {Algorithm::kReinforcedEa, Algorithm::kRandomEa, Algorithm::kRandomSearch}) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      SearchOptions o;
      o.algorithm = alg;
      o.total_models = 200;
      o.population_size = 20;
      o.sample_size = 20;
      o.reward = {kTarget, -1.0};
      o.seed = seed;
      CachedOracle oracle(std::make_unique<SurrogateOracle>(kSpec, default_surrogate_params(kSpec), seed));
      SearchEngine e(kSpec, o, oracle, latency);
      e.initialize_population();
      std::vector<std::int64_t> inserted, removed;
      for (const auto& m : e.population().members()) inserted.push_back(m.id);
      for (int i = 0; i < o.total_models - o.population_size; ++i) {
        const std::int64_t oldest = e.population()[0].id;
        const Candidate child = e.evolve_step();
        inserted.push_back(child.id);
        removed.push_back(oldest);
        violations += e.population().size() != o.population_size;
        violations += std::any_of(e.population().members().begin(), e.population().members().end(),
                                  [&](const Candidate& m) { return m.id == oldest; });
      }
      // Removal order is insertion order.
      violations += !std::equal(removed.begin(), removed.end(), inserted.begin());
      const auto final_model = select_final(e.history(), kTarget);
      if (!final_model) {
        ++violations;
      } else {
        violations += final_model->latency_us > kTarget;
        for (const auto& c : e.history()) violations += c.latency_us <= kTarget && c.auc > final_model->auc;
      }
      CachedOracle oracle2(std::make_unique<SurrogateOracle>(kSpec, default_surrogate_params(kSpec), seed));
      SearchEngine twin(kSpec, o, oracle2, latency);
      const SearchReport r = twin.run();
      violations += r.history.size() != e.history().size();
      for (std::size_t i = 0; i < std::min(r.history.size(), e.history().size()); ++i) {
        const Candidate &x = r.history[i], &y = e.history()[i];
        violations += !(x.config == y.config && x.auc == y.auc && x.latency_us == y.latency_us &&
                        x.reward == y.reward && x.parent_id == y.parent_id);
      }
      ++runs;
    }
  }
  return {violations == 0, fmt("%d runs of 200 models, %d violations", runs, violations)};
}

std::vector<int> lowest(const std::vector<double>& s, int k) {
  std::vector<int> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return s[a] < s[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// 9. Mask selection against a sort-based reference.
Outcome mask_selection() {
  std::mt19937_64 rng(909);
  std::uniform_int_distribution<int> coarse(0, 5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int bad = 0;
  const int cases = 10'000;
  for (int t = 0; t < cases; ++t) {
    const int heads = 1 + static_cast<int>(rng() % 8);
    const int steps = 1 + static_cast<int>(rng() % 20);
    const int ffn_dim = steps + static_cast<int>(rng() % 200);
    const SpaceSpec spec{1, heads, ffn_dim, steps};
    const bool ties = t % 2 == 0;
    HeadScores blocks(heads);
    for (auto& b : blocks)
      for (double& v : b) v = ties ? coarse(rng) : u(rng);
    std::vector<double> ffn(ffn_dim);
    for (double& v : ffn) v = ties ? coarse(rng) : u(rng);
    const LayerSparsity layer{static_cast<int>(rng() % heads), static_cast<int>(rng() % steps)};

    const std::vector<double> shared = shared_head_scores(blocks);
    const PruneMask m = select_prune_mask(shared, ffn, layer, spec);
    const int retained_ffn = retained_dims(spec, SparsityConfig({layer.attention_index}, {layer.ffn_index}), 0).ffn;
    bad += m.pruned_heads != lowest(shared, layer.attention_index);
    bad += m.pruned_ffn_dims != lowest(ffn, ffn_dim - retained_ffn);
    bad += static_cast<int>(m.pruned_heads.size()) >= heads;

    HeadScores permuted = blocks;
    for (auto& b : permuted) std::shuffle(b.begin(), b.end(), rng);
    bad += select_prune_mask(shared_head_scores(permuted), ffn, layer, spec).pruned_heads != m.pruned_heads;
  }
  return {bad == 0, fmt("%d cases, %d mismatches", cases, bad)};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.pass;
    std::printf("[%s] %d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  report(1, "reward exactness", reward_exactness);
  report(2, "brute-force optimality", brute_force_optimality);
  report(3, "controller gradient check", gradient_check);
  report(4, "policy-gradient bandit", bandit);
  PredictorMetrics metrics;
  std::optional<LatencyModel> model;
  report(5, "latency predictor quality", [&] {
    model = trained_predictor(&metrics);
    return predictor_quality(metrics);
  });
  if (!model) model = trained_predictor(nullptr);
  report(6, "reinforced vs random search efficiency", [&] { return search_efficiency(*model); });
  report(7, "alpha robustness", [&] { return alpha_robustness(*model); });
  report(8, "aging and feasibility invariants", [&] { return aging_invariants(*model); });
  report(9, "mask selection", mask_selection);

  std::printf("%d of 9 criteria passed\n", 9 - failures);
  return failures == 0 ? 0 : 1;
}
