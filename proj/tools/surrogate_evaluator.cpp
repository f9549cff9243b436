// Reference external evaluator: answers line-delimited requests on stdin
// with the synthetic surrogate AUC. Handy for exercising the evaluator
// protocol end to end without a training pipeline.
//
//   request:  {"id": 3, "attention_sparsity": [...], "ffn_sparsity": [...], "budget": 500}
//   response: {"id": 3, "auc": 0.8512}

#include "layerprune/accuracy_oracle.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <iostream>
#include <string>

using namespace layerprune;

int main(int argc, char** argv) {
  CLI::App app{"Surrogate AUC evaluator speaking the line-delimited JSON protocol"};
  std::string spec_text = "4,4,1024,100";
  std::uint64_t seed = 0;
  double noise = 0.0;
  app.add_option("--spec", spec_text, "layers,heads,ffn_dim,ffn_steps")->capture_default_str();
  app.add_option("--seed", seed)->capture_default_str();
  app.add_option("--noise", noise, "Surrogate noise sigma")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const SpaceSpec spec = parse_space_spec(spec_text);
  SurrogateOracle oracle(spec, default_surrogate_params(spec, noise), seed);
  std::string line;
  while (std::getline(std::cin, line)) {
    if (line.empty()) continue;
    try {
      const auto req = nlohmann::json::parse(line);
      const auto attn = req.at("attention_sparsity").get<std::vector<double>>();
      const auto ffn = req.at("ffn_sparsity").get<std::vector<double>>();
      const auto config = SparsityConfig::from_fractions(spec, attn, ffn);
      const double auc = oracle.evaluate(config).auc;
      std::cout << nlohmann::json{{"id", req.at("id")}, {"auc", auc}}.dump() << std::endl;
    } catch (const std::exception& e) {
      std::cerr << "surrogate_evaluator: bad request: " << e.what() << '\n';
      return 1;
    }
  }
  return 0;
}
