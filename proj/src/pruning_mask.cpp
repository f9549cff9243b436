#include "layerprune/pruning_mask.hpp"

#include "json.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace layerprune {

namespace {

// Indices of the `count` smallest scores, ties to the lower index, sorted.
std::vector<int> lowest(std::span<const double> scores, int count) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + count, order.end(), [&](int a, int b) {
    return scores[a] < scores[b] || (scores[a] == scores[b] && a < b);
  });
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace

double shared_head_score(const HeadScores& scores, int head) {
  if (head < 0 || head >= static_cast<int>(scores.size())) {
    throw std::out_of_range("head " + std::to_string(head) + " out of range");
  }
  const auto& b = scores[head];
  return (b[0] + b[1] + b[2] + b[3]) / 4.0;
}

std::vector<double> shared_head_scores(const HeadScores& scores) {
  std::vector<double> out(scores.size());
  for (int h = 0; h < static_cast<int>(scores.size()); ++h) out[h] = shared_head_score(scores, h);
  return out;
}

PruneMask select_prune_mask(std::span<const double> head_scores, std::span<const double> ffn_scores,
                            LayerSparsity layer, const SpaceSpec& spec) {
  if (head_scores.size() != static_cast<std::size_t>(spec.num_heads)) {
    throw std::invalid_argument("expected " + std::to_string(spec.num_heads) + " head scores");
  }
  if (ffn_scores.size() != static_cast<std::size_t>(spec.ffn_dim)) {
    throw std::invalid_argument("expected " + std::to_string(spec.ffn_dim) + " FFN scores");
  }
  if (layer.attention_index < 0 || layer.attention_index >= spec.num_heads) {
    throw std::invalid_argument("attention sparsity would leave no head retained");
  }
  if (layer.ffn_index < 0 || layer.ffn_index >= spec.ffn_steps) {
    throw std::invalid_argument("FFN sparsity index out of range");
  }
  SpaceSpec one_layer = spec;
  one_layer.num_layers = 1;
  const SparsityConfig config({layer.attention_index}, {layer.ffn_index});
  const auto kept = retained_dims(one_layer, config, 0);

  PruneMask mask;
  mask.pruned_heads = lowest(head_scores, spec.num_heads - kept.heads);
  mask.pruned_ffn_dims = lowest(ffn_scores, spec.ffn_dim - kept.ffn);
  return mask;
}

std::vector<PruneMask> select_prune_masks(std::span<const std::vector<double>> head_scores,
                                          std::span<const std::vector<double>> ffn_scores,
                                          const SparsityConfig& config, const SpaceSpec& spec) {
  config.validate(spec);
  if (head_scores.size() != static_cast<std::size_t>(spec.num_layers) ||
      ffn_scores.size() != static_cast<std::size_t>(spec.num_layers)) {
    throw std::invalid_argument("need head and FFN scores for every layer");
  }
  std::vector<PruneMask> out;
  for (int i = 0; i < spec.num_layers; ++i) {
    out.push_back(select_prune_mask(head_scores[i], ffn_scores[i],
                                    {config.attention_index()[i], config.ffn_index()[i]}, spec));
  }
  return out;
}

std::string export_masks(std::span<const PruneMask> masks) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < masks.size(); ++i) {
    layers.push_back({{"layer", i},
                      {"pruned_heads", masks[i].pruned_heads},
                      {"pruned_ffn_dims", masks[i].pruned_ffn_dims}});
  }
  return nlohmann::json{{"layers", layers}}.dump();
}

std::vector<PruneMask> import_masks(const std::string& text) {
  const auto doc = nlohmann::json::parse(text);
  if (!doc.is_object() || !doc.contains("layers") || !doc["layers"].is_array()) {
    throw std::invalid_argument("mask file needs a \"layers\" array");
  }
  auto ascending = [](const std::vector<int>& v, const std::string& what, std::size_t layer) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] < 0 || (i > 0 && v[i] <= v[i - 1])) {
        throw std::invalid_argument("layer " + std::to_string(layer) + ": " + what +
                                    " must be distinct nonnegative indices in ascending order");
      }
    }
  };
  std::vector<PruneMask> out;
  for (const auto& layer : doc["layers"]) {
    if (layer.at("layer").get<std::size_t>() != out.size()) {
      throw std::invalid_argument("mask layers must be listed in order starting at 0");
    }
    PruneMask m{layer.at("pruned_heads").get<std::vector<int>>(), layer.at("pruned_ffn_dims").get<std::vector<int>>()};
    ascending(m.pruned_heads, "pruned_heads", out.size());
    ascending(m.pruned_ffn_dims, "pruned_ffn_dims", out.size());
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace layerprune
