#include "layerprune/accuracy_oracle.hpp"

#include "doctest.h"
#include "json.hpp"

#include <chrono>
#include <set>

using namespace layerprune;
using namespace std::chrono_literals;

namespace {

const SpaceSpec kSpec{};

SparsityConfig sparser(const SparsityConfig& c, Rng& rng) {
  SparsityConfig out = c;
  for (int pos = 0; pos < kSpec.num_genes(); ++pos) {
    std::uniform_int_distribution<int> d(c.gene(pos), kSpec.candidates_at(pos) - 1);
    out = out.with_gene(pos, d(rng));
  }
  return out;
}

// Counts inner evaluations so cache behaviour is observable.
class CountingOracle final : public AccuracyOracle {
 public:
  explicit CountingOracle(int& calls) : calls_(calls) {}
  OracleResult evaluate(const SparsityConfig& c) override {
    ++calls_;
    return {0.5 + 0.001 * c.gene(1), OracleSource::kSurrogate};
  }

 private:
  int& calls_;
};

}  // namespace

TEST_CASE("surrogate basics") {
  const SurrogateParams p = default_surrogate_params(kSpec);
  Rng rng(1);
  CHECK(surrogate_auc(kSpec, p, SparsityConfig::dense(kSpec), rng).auc == p.auc_max);
  CHECK(surrogate_auc_mean(kSpec, p, SparsityConfig::dense(kSpec)) == p.auc_max);

  Rng gen(2);
  for (int i = 0; i < 5000; ++i) {
    const SparsityConfig more = sample_uniform(kSpec, gen);
    const SparsityConfig less = sparser(more, gen);
    const double a = surrogate_auc_mean(kSpec, p, more), b = surrogate_auc_mean(kSpec, p, less);
    CHECK(a >= b);
    CHECK(b > 0.0);
    CHECK(a < 1.0);
  }
}

TEST_CASE("deeper layers are cheaper to prune") {
  const SurrogateParams p = default_surrogate_params(kSpec);
  const SparsityConfig first_attn({2, 0, 0, 0}, {0, 0, 0, 0});
  const SparsityConfig last_attn({0, 0, 0, 2}, {0, 0, 0, 0});
  CHECK(surrogate_auc_mean(kSpec, p, last_attn) > surrogate_auc_mean(kSpec, p, first_attn));
  const SparsityConfig first_ffn({0, 0, 0, 0}, {60, 0, 0, 0});
  const SparsityConfig last_ffn({0, 0, 0, 0}, {0, 0, 0, 60});
  CHECK(surrogate_auc_mean(kSpec, p, last_ffn) > surrogate_auc_mean(kSpec, p, first_ffn));
}

TEST_CASE("noisy surrogate stays in range and is seeded") {
  const SurrogateParams p = default_surrogate_params(kSpec, 0.5);
  SurrogateOracle a(kSpec, p, 9), b(kSpec, p, 9);
  Rng gen(3);
  for (int i = 0; i < 2000; ++i) {
    const SparsityConfig c = sample_uniform(kSpec, gen);
    const double x = a.evaluate(c).auc;
    CHECK(x > 0.0);
    CHECK(x < 1.0);
    CHECK(b.evaluate(c).auc == x);
  }
}

TEST_CASE("surrogate parameter validation") {
  SurrogateParams p = default_surrogate_params(kSpec);
  p.layer_importance_attn.pop_back();
  CHECK_THROWS(p.validate(kSpec));
  p = default_surrogate_params(kSpec);
  p.auc_max = 1.0;
  CHECK_THROWS(p.validate(kSpec));
  p = default_surrogate_params(kSpec);
  p.layer_importance_ffn[0] = 1.5;
  CHECK_THROWS(p.validate(kSpec));
}

TEST_CASE("request and response lines") {
  const SparsityConfig c({1, 0, 0, 3}, {37, 0, 99, 0});
  const auto req = nlohmann::json::parse(make_evaluator_request(kSpec, 7, c, 500));
  CHECK(req["id"] == 7);
  CHECK(req["budget"] == 500);
  CHECK(req["attention_sparsity"] == nlohmann::json({0.25, 0.0, 0.0, 0.75}));
  CHECK(req["ffn_sparsity"] == nlohmann::json({0.37, 0.0, 0.99, 0.0}));

  CHECK(parse_evaluator_response(R"({"id": 7, "auc": 0.8612})", 7) == 0.8612);
  CHECK_THROWS_AS(parse_evaluator_response(R"({"id": 8, "auc": 0.8612})", 7), ProtocolMismatch);
  CHECK_THROWS_AS(parse_evaluator_response(R"({"id": 7, "auc": "high"})", 7), MalformedResponse);
  CHECK_THROWS_AS(parse_evaluator_response(R"({"id": 7})", 7), MalformedResponse);
  CHECK_THROWS_AS(parse_evaluator_response("not json", 7), MalformedResponse);
  CHECK_THROWS_AS(parse_evaluator_response(R"({"id": 7, "auc": 1.5})", 7), MalformedResponse);
  try {
    parse_evaluator_response(R"({"id": 7, "auc": null})", 7);
  } catch (const MalformedResponse& e) {
    CHECK(e.raw() == R"({"id": 7, "auc": null})");
  }
}

TEST_CASE("external evaluator process") {
  const SparsityConfig c = SparsityConfig::dense(kSpec);
  ExternalOracleOptions opts;
  opts.first_request_id = 7;
  opts.timeout = 5s;

  SUBCASE("echoed id") {
    ExternalOracle o(kSpec, R"(read line; echo '{"id": 7, "auc": 0.8612}'; read line)", opts);
    const OracleResult r = o.evaluate(c);
    CHECK(r.auc == 0.8612);
    CHECK(r.source == OracleSource::kExternal);
  }
  SUBCASE("wrong id") {
    ExternalOracle o(kSpec, R"(read line; echo '{"id": 8, "auc": 0.8612}'; read line)", opts);
    CHECK_THROWS_AS(o.evaluate(c), ProtocolMismatch);
  }
  SUBCASE("non-numeric auc") {
    ExternalOracle o(kSpec, R"(read line; echo '{"id": 7, "auc": "n/a"}'; read line)", opts);
    CHECK_THROWS_AS(o.evaluate(c), MalformedResponse);
  }
  SUBCASE("evaluator exits") {
    ExternalOracle o(kSpec, "exit 3", opts);
    CHECK_THROWS_AS(o.evaluate(c), EvaluatorExited);
  }
  SUBCASE("evaluator hangs") {
    opts.timeout = 200ms;
    ExternalOracle o(kSpec, "sleep 30", opts);
    const auto start = std::chrono::steady_clock::now();
    CHECK_THROWS_AS(o.evaluate(c), EvaluatorTimeout);
    CHECK(std::chrono::steady_clock::now() - start < 5s);
  }
  SUBCASE("budget is forwarded") {
    // Answers with auc = budget / 1000 to prove the field arrived.
    ExternalOracle o(kSpec,
                     R"(read line; b=$(echo "$line" | sed 's/.*"budget":\([0-9]*\).*/\1/'); )"
                     R"(echo "{\"id\": 7, \"auc\": 0.$b}"; read line)",
                     opts);
    CHECK(o.external_auc(c, 123).auc == doctest::Approx(0.123));
  }
}

TEST_CASE("reference evaluator agrees with the in-process surrogate") {
  ExternalOracle ext(kSpec, std::string(SURROGATE_EVALUATOR_PATH) + " --seed 4");
  SurrogateOracle local(kSpec, default_surrogate_params(kSpec), 4);
  Rng gen(4);
  for (int i = 0; i < 50; ++i) {
    const SparsityConfig c = sample_uniform(kSpec, gen);
    CHECK(ext.evaluate(c).auc == doctest::Approx(local.evaluate(c).auc).epsilon(1e-12));
  }
}

TEST_CASE("cache") {
  int calls = 0;
  CachedOracle cache(std::make_unique<CountingOracle>(calls));
  const SparsityConfig a({0, 0, 0, 0}, {1, 0, 0, 0}), b({0, 0, 0, 0}, {2, 0, 0, 0});
  const OracleResult first = cache.evaluate(a);
  const OracleResult second = cache.evaluate(a);
  CHECK(first.source == OracleSource::kSurrogate);
  CHECK(second.source == OracleSource::kCache);
  CHECK(second.auc == first.auc);
  cache.evaluate(b);
  CHECK(calls == 2);

  int calls2 = 0;
  CachedOracle counted(std::make_unique<CountingOracle>(calls2));
  Rng gen(6);
  const SpaceSpec tiny{2, 2, 64, 4};
  std::set<SparsityConfig> distinct;
  const int n = 500;
  for (int i = 0; i < n; ++i) {
    const SparsityConfig c = sample_uniform(tiny, gen);
    distinct.insert(c);
    counted.evaluate(c);
  }
  CHECK(counted.hits() == n - static_cast<std::int64_t>(distinct.size()));
  CHECK(counted.misses() == static_cast<std::int64_t>(distinct.size()));
  CHECK(counted.size() == distinct.size());
  CHECK(calls2 == static_cast<int>(distinct.size()));
}
