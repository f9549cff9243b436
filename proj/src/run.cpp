#include "layerprune/run.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace layerprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Collects type and range problems instead of stopping at the first one.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string prefix, std::vector<std::string>& problems)
      : obj_(obj), prefix_(std::move(prefix)), problems_(problems) {}

  bool has(const char* key) const { return obj_.is_object() && obj_.contains(key); }

  template <typename T>
  T get(const char* key, T fallback) {
    if (!has(key)) return fallback;
    try {
      const json& v = obj_.at(key);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
      }
      return v.get<T>();
    } catch (const std::exception& e) {
      problem(key, e.what());
      return fallback;
    }
  }

  std::vector<double> get_list(const char* key, std::vector<double> fallback) {
    if (!has(key)) return fallback;
    const json& v = obj_.at(key);
    if (!v.is_array() || !std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_number(); })) {
      problem(key, "expected an array of numbers");
      return fallback;
    }
    return v.get<std::vector<double>>();
  }

  void problem(const char* key, const std::string& what) { problems_.push_back(prefix_ + key + ": " + what); }

 private:
  const json& obj_;
  std::string prefix_;
  std::vector<std::string>& problems_;
};

template <typename Fn>
void check(std::vector<std::string>& problems, const std::string& where, Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    problems.push_back(where + ": " + e.what());
  }
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

json stats_to_json(const PopulationStats& s) {
  return {{"iteration", s.iteration}, {"mean_reward", s.mean_reward}, {"reward_variance", s.reward_variance}};
}

void write_json_file(const fs::path& path, const json& doc) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << doc.dump(2) << '\n';
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error([&] {
        std::string msg = "invalid run config:";
        for (const auto& p : problems) msg += "\n  - " + p;
        return msg;
      }()),
      problems_(std::move(problems)) {}

RunConfig parse_run_config(const json& doc, const fs::path& base_dir) {
  std::vector<std::string> problems;
  RunConfig cfg;
  if (!doc.is_object()) throw ConfigError({"run config must be a JSON object"});
  FieldReader top(doc, "", problems);

  static const std::vector<std::string> known = {
      "algorithm", "N", "P", "S", "target_latency_us", "alpha", "relax", "seed", "space", "oracle",
      "latency_model", "output_dir", "cache", "exhaustive_mode", "allow_noop_mutation", "max_init_attempts",
      "controller"};
  for (const auto& [key, _] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) problems.push_back(key + ": unknown field");
  }

  if (top.has("space")) {
    const json& s = doc["space"];
    if (!s.is_object()) {
      problems.push_back("space: expected an object");
    } else {
      FieldReader r(s, "space.", problems);
      cfg.space.num_layers = r.get("num_layers", cfg.space.num_layers);
      cfg.space.num_heads = r.get("num_heads", cfg.space.num_heads);
      cfg.space.ffn_dim = r.get("ffn_dim", cfg.space.ffn_dim);
      cfg.space.ffn_steps = r.get("ffn_steps", cfg.space.ffn_steps);
      check(problems, "space", [&] { cfg.space.validate(); });
    }
  }
  const bool space_ok = cfg.space.num_layers > 0 && cfg.space.num_heads > 0 && cfg.space.ffn_dim > 0 &&
                        cfg.space.ffn_steps > 0;

  auto& so = cfg.search;
  if (!top.has("algorithm")) {
    problems.push_back("algorithm: required");
  } else {
    const auto name = top.get<std::string>("algorithm", "");
    check(problems, "algorithm", [&] { so.algorithm = parse_algorithm(name); });
  }
  so.total_models = top.get("N", so.total_models);
  so.population_size = top.get("P", so.population_size);
  so.sample_size = top.get("S", so.sample_size);
  so.reward.target_latency_us = top.get("target_latency_us", so.reward.target_latency_us);
  so.reward.alpha = top.get("alpha", so.reward.alpha);
  so.relax = top.get("relax", so.relax);
  so.seed = top.get<std::uint64_t>("seed", 0);
  so.exhaustive_mode = top.get("exhaustive_mode", so.exhaustive_mode);
  so.max_init_attempts = top.get<std::int64_t>("max_init_attempts", so.max_init_attempts);
  so.controller.allow_noop_mutation = top.get("allow_noop_mutation", so.controller.allow_noop_mutation);
  cfg.cache = top.get("cache", cfg.cache);
  if (!top.has("target_latency_us")) problems.push_back("target_latency_us: required");
  if (so.population_size < 1) problems.push_back("P: must be at least 1");
  if (so.sample_size < 1) problems.push_back("S: must be at least 1");
  if (so.total_models < so.population_size) problems.push_back("N: must be at least P");
  if (!(so.reward.target_latency_us > 0.0)) problems.push_back("target_latency_us: must be positive");
  if (!(so.reward.alpha <= 0.0)) problems.push_back("alpha: must be nonpositive");
  if (!(so.relax >= 1.0)) problems.push_back("relax: must be at least 1");
  if (so.max_init_attempts < 1) problems.push_back("max_init_attempts: must be positive");

  if (top.has("controller")) {
    FieldReader r(doc["controller"], "controller.", problems);
    auto& co = so.controller;
    co.embed_dim = r.get("embed_dim", co.embed_dim);
    co.encoder_hidden = r.get("encoder_hidden", co.encoder_hidden);
    co.mutator_hidden = r.get("mutator_hidden", co.mutator_hidden);
    co.mutator_layers = r.get("mutator_layers", co.mutator_layers);
    co.learning_rate = r.get("learning_rate", co.learning_rate);
    co.baseline_decay = r.get("baseline_decay", co.baseline_decay);
    co.init_scale = r.get("init_scale", co.init_scale);
    check(problems, "controller", [&] { co.validate(); });
  }

  if (!top.has("oracle")) {
    problems.push_back("oracle: required");
  } else {
    const json& o = doc["oracle"];
    FieldReader r(o, "oracle.", problems);
    const auto type = r.get<std::string>("type", "");
    if (type == "surrogate") {
      cfg.oracle.kind = OracleConfig::Kind::kSurrogate;
      if (space_ok) {
        auto& sp = cfg.oracle.surrogate;
        sp = default_surrogate_params(cfg.space);
        sp.layer_importance_attn = r.get_list("layer_importance_attn", sp.layer_importance_attn);
        sp.layer_importance_ffn = r.get_list("layer_importance_ffn", sp.layer_importance_ffn);
        sp.auc_max = r.get("auc_max", sp.auc_max);
        sp.curvature = r.get("curvature", sp.curvature);
        sp.noise_sigma = r.get("noise_sigma", sp.noise_sigma);
        check(problems, "oracle", [&] { sp.validate(cfg.space); });
      }
    } else if (type == "external") {
      cfg.oracle.kind = OracleConfig::Kind::kExternal;
      cfg.oracle.command = r.get<std::string>("command", "");
      cfg.oracle.budget = r.get("budget", cfg.oracle.budget);
      cfg.oracle.timeout_s = r.get("timeout_s", cfg.oracle.timeout_s);
      if (cfg.oracle.command.empty()) problems.push_back("oracle.command: required for an external oracle");
      if (cfg.oracle.budget < 1) problems.push_back("oracle.budget: must be positive");
      if (!(cfg.oracle.timeout_s > 0.0)) problems.push_back("oracle.timeout_s: must be positive");
    } else {
      problems.push_back("oracle.type: expected 'surrogate' or 'external'");
    }
  }

  if (!top.has("latency_model")) {
    problems.push_back("latency_model: required");
  } else if (doc["latency_model"].is_string()) {
    cfg.latency.kind = LatencyConfig::Kind::kForest;
    fs::path p = doc["latency_model"].get<std::string>();
    cfg.latency.model_path = p.is_absolute() ? p : base_dir / p;
    if (!fs::exists(cfg.latency.model_path)) {
      problems.push_back("latency_model: file not found: " + cfg.latency.model_path.string());
    }
  } else if (doc["latency_model"].is_object()) {
    const json& l = doc["latency_model"];
    FieldReader r(l, "latency_model.", problems);
    if (r.get<std::string>("type", "") != "cost_model") {
      problems.push_back("latency_model.type: expected 'cost_model' (or give a model file path)");
    } else if (space_ok) {
      cfg.latency.kind = LatencyConfig::Kind::kCostModel;
      auto& cm = cfg.latency.cost_model;
      cm = default_cost_model(cfg.space, r.get("dense_latency_us", kDenseLatencyUs), 0.0);
      cm.base_us = r.get("base_us", cm.base_us);
      cm.attn_us_per_head = r.get_list("attn_us_per_head", cm.attn_us_per_head);
      cm.ffn_us_per_dim = r.get_list("ffn_us_per_dim", cm.ffn_us_per_dim);
      check(problems, "latency_model", [&] { cm.validate(cfg.space); });
    }
  } else {
    problems.push_back("latency_model: expected a path or a cost_model object");
  }

  if (!top.has("output_dir")) {
    problems.push_back("output_dir: required");
  } else {
    fs::path p = top.get<std::string>("output_dir", "");
    cfg.output_dir = p.is_absolute() ? p : base_dir / p;
  }

  if (!problems.empty()) throw ConfigError(std::move(problems));
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError({"cannot open run config " + path.string()});
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  }
  return parse_run_config(doc, path.parent_path());
}

json to_json(const RunConfig& c) {
  const auto& s = c.search;
  json doc = {
      {"algorithm", to_string(s.algorithm)},
      {"N", s.total_models},
      {"P", s.population_size},
      {"S", s.sample_size},
      {"target_latency_us", s.reward.target_latency_us},
      {"alpha", s.reward.alpha},
      {"relax", s.relax},
      {"seed", s.seed},
      {"space",
       {{"num_layers", c.space.num_layers},
        {"num_heads", c.space.num_heads},
        {"ffn_dim", c.space.ffn_dim},
        {"ffn_steps", c.space.ffn_steps}}},
      {"cache", c.cache},
      {"exhaustive_mode", s.exhaustive_mode},
      {"allow_noop_mutation", s.controller.allow_noop_mutation},
      {"max_init_attempts", s.max_init_attempts},
      {"controller",
       {{"embed_dim", s.controller.embed_dim},
        {"encoder_hidden", s.controller.encoder_hidden},
        {"mutator_hidden", s.controller.mutator_hidden},
        {"mutator_layers", s.controller.mutator_layers},
        {"learning_rate", s.controller.learning_rate},
        {"baseline_decay", s.controller.baseline_decay},
        {"init_scale", s.controller.init_scale}}},
      {"output_dir", c.output_dir.string()},
  };
  if (c.oracle.kind == OracleConfig::Kind::kSurrogate) {
    const auto& sp = c.oracle.surrogate;
    doc["oracle"] = {{"type", "surrogate"},
                     {"layer_importance_attn", sp.layer_importance_attn},
                     {"layer_importance_ffn", sp.layer_importance_ffn},
                     {"auc_max", sp.auc_max},
                     {"curvature", sp.curvature},
                     {"noise_sigma", sp.noise_sigma}};
  } else {
    doc["oracle"] = {{"type", "external"},
                     {"command", c.oracle.command},
                     {"budget", c.oracle.budget},
                     {"timeout_s", c.oracle.timeout_s}};
  }
  if (c.latency.kind == LatencyConfig::Kind::kForest) {
    doc["latency_model"] = c.latency.model_path.string();
  } else {
    const auto& cm = c.latency.cost_model;
    doc["latency_model"] = {{"type", "cost_model"},
                            {"base_us", cm.base_us},
                            {"attn_us_per_head", cm.attn_us_per_head},
                            {"ffn_us_per_dim", cm.ffn_us_per_dim}};
  }
  return doc;
}

std::unique_ptr<AccuracyOracle> make_oracle(const RunConfig& config) {
  std::unique_ptr<AccuracyOracle> oracle;
  if (config.oracle.kind == OracleConfig::Kind::kSurrogate) {
    // Separate stream from the engine so surrogate noise is independent of
    // the search's own draws.
    std::seed_seq seq{static_cast<std::uint32_t>(config.search.seed),
                      static_cast<std::uint32_t>(config.search.seed >> 32), 3u};
    std::uint32_t s[2];
    seq.generate(s, s + 2);
    oracle = std::make_unique<SurrogateOracle>(config.space, config.oracle.surrogate,
                                               (static_cast<std::uint64_t>(s[0]) << 32) | s[1]);
  } else {
    ExternalOracleOptions opts;
    opts.budget = config.oracle.budget;
    opts.timeout = std::chrono::milliseconds(static_cast<std::int64_t>(config.oracle.timeout_s * 1000.0));
    oracle = std::make_unique<ExternalOracle>(config.space, config.oracle.command, opts);
  }
  if (config.cache) oracle = std::make_unique<CachedOracle>(std::move(oracle));
  return oracle;
}

std::unique_ptr<LatencyEstimator> make_latency_estimator(const RunConfig& config) {
  if (config.latency.kind == LatencyConfig::Kind::kCostModel) {
    return std::make_unique<CostModelEstimator>(config.space, config.latency.cost_model);
  }
  auto model = std::make_unique<LatencyModel>(LatencyModel::load(config.latency.model_path));
  if (!(model->spec() == config.space)) {
    throw ConfigError({"latency_model: trained for space " + format_space_spec(model->spec()) +
                       ", run uses " + format_space_spec(config.space)});
  }
  return model;
}

json candidate_to_json(const SpaceSpec& spec, const Candidate& c) {
  return {{"iteration", c.iteration},
          {"id", c.id},
          {"parent_id", c.parent_id ? json(*c.parent_id) : json(nullptr)},
          {"config", format_config(spec, c.config)},
          {"predicted_latency_us", c.latency_us},
          {"auc", c.auc},
          {"reward", c.reward}};
}

JsonlHistorySink::JsonlHistorySink(SpaceSpec spec, const fs::path& path) : spec_(spec), out_(path) {
  if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
}

void JsonlHistorySink::on_candidate(const Candidate& c) {
  out_ << candidate_to_json(spec_, c).dump() << '\n';
  out_.flush();
}

json report_to_json(const RunConfig& config, const SearchReport& report) {
  json stats = json::array();
  for (const auto& s : report.stats) stats.push_back(stats_to_json(s));
  return {{"algorithm", to_string(config.search.algorithm)},
          {"target_latency_us", config.search.reward.target_latency_us},
          {"alpha", config.search.reward.alpha},
          {"seed", config.search.seed},
          {"models_explored", report.history.size()},
          {"feasible", report.final_model.has_value()},
          {"final_model", report.final_model ? candidate_to_json(config.space, *report.final_model) : json(nullptr)},
          {"population_stats", stats}};
}

void write_stats_csv(std::ostream& os, std::span<const PopulationStats> stats) {
  os << "iteration,mean_reward,reward_variance\n";
  for (const auto& s : stats) {
    os << s.iteration << ',' << format_fraction(s.mean_reward) << ',' << format_fraction(s.reward_variance) << '\n';
  }
}

std::string file_sha256(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(is.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

int execute_search(const fs::path& config_path, std::ostream& out, std::ostream& err) {
  RunConfig config;
  try {
    config = load_run_config(config_path);
  } catch (const ConfigError& e) {
    err << e.what() << '\n';
    return 1;
  }
  try {
    fs::create_directories(config.output_dir);
    auto latency = make_latency_estimator(config);

    json inputs = {{"config", {{"path", config_path.string()}, {"sha256", file_sha256(config_path)}}}};
    if (config.latency.kind == LatencyConfig::Kind::kForest) {
      inputs["latency_model"] = {{"path", config.latency.model_path.string()},
                                 {"sha256", file_sha256(config.latency.model_path)}};
    }
    write_json_file(config.output_dir / "manifest.json", {{"tool", "layerprune"},
                                                          {"version", kToolVersion},
                                                          {"seed", config.search.seed},
                                                          {"config", to_json(config)},
                                                          {"inputs", inputs},
                                                          {"started_at", utc_timestamp()}});

    auto oracle = make_oracle(config);
    JsonlHistorySink sink(config.space, config.output_dir / "history.jsonl");
    SearchEngine engine(config.space, config.search, *oracle, *latency, &sink);
    SearchReport report;
    try {
      report = engine.run();
    } catch (const InfeasibleConstraint& e) {
      err << "infeasible: " << e.what() << '\n';
      report.history = engine.history();
      report.stats = engine.stats();
      write_json_file(config.output_dir / "report.json", report_to_json(config, report));
      return 2;
    } catch (const std::exception& e) {
      err << "search aborted: " << e.what() << '\n';
      report.history = engine.history();
      report.stats = engine.stats();
      write_json_file(config.output_dir / "report.json", report_to_json(config, report));
      return 1;
    }
    write_json_file(config.output_dir / "report.json", report_to_json(config, report));
    {
      std::ofstream csv(config.output_dir / "population_stats.csv");
      write_stats_csv(csv, report.stats);
    }
    if (!report.final_model) {
      err << "infeasible: no explored model meets the " << format_fraction(config.search.reward.target_latency_us)
          << " us target\n";
      return 2;
    }
    const auto& best = *report.final_model;
    out << "final model: " << format_config(config.space, best.config) << '\n'
        << "  auc " << format_fraction(best.auc) << ", predicted latency " << format_fraction(best.latency_us)
        << " us, reward " << format_fraction(best.reward) << " (id " << best.id << ", iteration "
        << best.iteration << ")\n"
        << "  explored " << report.history.size() << " models; results in " << config.output_dir.string() << '\n';
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

ReportSeries load_report_series(const fs::path& report_path) {
  std::ifstream is(report_path);
  if (!is) throw std::runtime_error("cannot open report " + report_path.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(report_path.string() + ": " + e.what());
  }
  ReportSeries s;
  s.label = doc.value("algorithm", report_path.stem().string());
  if (!doc.contains("population_stats") || !doc["population_stats"].is_array() ||
      doc["population_stats"].empty()) {
    throw std::runtime_error(report_path.string() + ": report has no population statistics");
  }
  for (const auto& row : doc["population_stats"]) {
    s.stats.push_back({row.at("iteration").get<int>(), row.at("mean_reward").get<double>(),
                       row.at("reward_variance").get<double>()});
  }
  return s;
}

ComparisonTable compare_reports(std::span<const ReportSeries> series, int every) {
  if (series.size() < 2) throw std::invalid_argument("compare needs at least two reports");
  if (every < 1) throw std::invalid_argument("checkpoint spacing must be positive");
  ComparisonTable table;
  std::size_t shortest = series[0].stats.size();
  std::size_t longest = 0;
  for (const auto& s : series) {
    if (s.stats.empty()) throw std::invalid_argument("report '" + s.label + "' is empty");
    shortest = std::min(shortest, s.stats.size());
    longest = std::max(longest, s.stats.size());
    std::string label = s.label;
    for (int k = 2; std::find(table.labels.begin(), table.labels.end(), label) != table.labels.end(); ++k) {
      label = s.label + "_" + std::to_string(k);
    }
    table.labels.push_back(label);
  }
  table.truncated = shortest != longest;
  for (std::size_t i = 0; i < shortest; ++i) {
    const int iteration = series[0].stats[i].iteration;
    if (iteration % every != 0) continue;
    std::vector<PopulationStats> row;
    for (const auto& s : series) {
      if (s.stats[i].iteration != iteration) {
        throw std::invalid_argument("report '" + s.label + "' is not aligned at iteration " +
                                    std::to_string(iteration));
      }
      row.push_back(s.stats[i]);
    }
    table.iterations.push_back(iteration);
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_comparison_text(std::ostream& os, const ComparisonTable& table) {
  os << std::setw(9) << "iteration";
  for (const auto& l : table.labels) os << "  " << std::setw(18) << (l + " mean") << "  " << std::setw(18) << (l + " var");
  os << '\n';
  for (std::size_t i = 0; i < table.iterations.size(); ++i) {
    os << std::setw(9) << table.iterations[i];
    for (const auto& s : table.rows[i]) {
      os << "  " << std::setw(18) << std::fixed << std::setprecision(6) << s.mean_reward << "  " << std::setw(18)
         << std::scientific << std::setprecision(3) << s.reward_variance;
    }
    os << std::defaultfloat << '\n';
  }
}

void write_comparison_csv(std::ostream& os, const ComparisonTable& table) {
  os << "iteration";
  for (const auto& l : table.labels) os << ',' << l << "_mean," << l << "_var";
  os << '\n';
  for (std::size_t i = 0; i < table.iterations.size(); ++i) {
    os << table.iterations[i];
    for (const auto& s : table.rows[i]) os << ',' << format_fraction(s.mean_reward) << ',' << format_fraction(s.reward_variance);
    os << '\n';
  }
}

}  // namespace layerprune
