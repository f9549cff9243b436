#pragma once

#include "layerprune/search_space.hpp"

#include <array>
#include <span>
#include <string>
#include <vector>

namespace layerprune {

/// Importance scores of one head's query, key, value and output blocks.
using HeadBlockScores = std::array<double, 4>;
using HeadScores = std::vector<HeadBlockScores>;

/// One importance score per head: the mean of its four block scores, so all
/// four projections of a head are kept or dropped together.
double shared_head_score(const HeadScores& scores, int head);
std::vector<double> shared_head_scores(const HeadScores& scores);

/// Pruned indices of one encoder layer, both sorted ascending. The FFN set
/// applies to rows of the first FFN projection and the matching columns of
/// the second.
struct PruneMask {
  std::vector<int> pruned_heads;
  std::vector<int> pruned_ffn_dims;

  friend bool operator==(const PruneMask&, const PruneMask&) = default;
};

/// Gene indices of one layer.
struct LayerSparsity {
  int attention_index = 0;
  int ffn_index = 0;
};

/// Prunes the attention_index lowest-scoring heads and the
/// ffn_dim - retained_ffn lowest-scoring FFN dims. Equal scores prune the
/// lower index first.
PruneMask select_prune_mask(std::span<const double> head_scores, std::span<const double> ffn_scores,
                            LayerSparsity layer, const SpaceSpec& spec);

/// Masks for every layer of a config. Score spans are indexed by layer.
std::vector<PruneMask> select_prune_masks(std::span<const std::vector<double>> head_scores,
                                          std::span<const std::vector<double>> ffn_scores,
                                          const SparsityConfig& config, const SpaceSpec& spec);

/// JSON record: {"layers": [{"layer": i, "pruned_heads": [...], "pruned_ffn_dims": [...]}, ...]}.
std::string export_masks(std::span<const PruneMask> masks);
std::vector<PruneMask> import_masks(const std::string& text);

}  // namespace layerprune
