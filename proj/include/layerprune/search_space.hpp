#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace layerprune {

using Rng = std::mt19937_64;

/// Shape of the layer-wise sparsity space over a stack of encoder layers.
///
/// Attention genes take values i/num_heads for i in [0, num_heads), so at
/// least one head always survives. FFN genes take values j/ffn_steps for j in
/// [0, ffn_steps).
struct SpaceSpec {
  int num_layers = 4;
  int num_heads = 4;
  int ffn_dim = 1024;
  int ffn_steps = 100;

  /// Throws std::invalid_argument if any field is non-positive.
  void validate() const;

  int num_genes() const { return 2 * num_layers; }
  int vocab_size() const { return num_heads + ffn_steps; }
  /// Candidate count of the gene at sublayer position `pos` (even = attention).
  int candidates_at(int pos) const { return is_attention_pos(pos) ? num_heads : ffn_steps; }
  static bool is_attention_pos(int pos) { return pos % 2 == 0; }

  friend bool operator==(const SpaceSpec&, const SpaceSpec&) = default;
};

/// Parses "L,H,F,S" (layers, heads, ffn_dim, ffn_steps).
SpaceSpec parse_space_spec(std::string_view text);
std::string format_space_spec(const SpaceSpec& spec);

/// The genome. Genes are stored as candidate indices; fractional sparsities
/// are derived from the owning SpaceSpec.
class SparsityConfig {
 public:
  SparsityConfig() = default;
  SparsityConfig(std::vector<int> attention_index, std::vector<int> ffn_index);

  /// The config with every gene at zero sparsity.
  static SparsityConfig dense(const SpaceSpec& spec);
  /// Builds from fractional sparsities; each value must be a candidate.
  static SparsityConfig from_fractions(const SpaceSpec& spec, std::span<const double> attention,
                                       std::span<const double> ffn);

  int num_layers() const { return static_cast<int>(attention_.size()); }
  const std::vector<int>& attention_index() const { return attention_; }
  const std::vector<int>& ffn_index() const { return ffn_; }

  /// Gene index at interleaved position pos: [a1, f1, a2, f2, ...].
  int gene(int pos) const;
  SparsityConfig with_gene(int pos, int index) const;

  double attention_sparsity(const SpaceSpec& spec, int layer) const;
  double ffn_sparsity(const SpaceSpec& spec, int layer) const;

  /// Throws std::invalid_argument unless every gene is a candidate of `spec`.
  void validate(const SpaceSpec& spec) const;
  bool is_valid(const SpaceSpec& spec) const;

  friend bool operator==(const SparsityConfig&, const SparsityConfig&) = default;
  friend auto operator<=>(const SparsityConfig&, const SparsityConfig&) = default;

 private:
  std::vector<int> attention_;
  std::vector<int> ffn_;
};

struct SparsityConfigHash {
  std::size_t operator()(const SparsityConfig& c) const noexcept;
};

struct RetainedDims {
  int heads = 0;
  int ffn = 0;
};

/// (num_heads * ffn_steps)^num_layers. Throws std::overflow_error instead of
/// wrapping.
std::uint64_t space_size(const SpaceSpec& spec);

/// Retained heads and FFN dims of one layer. FFN uses round-half-even of
/// (1 - f) * ffn_dim with a floor of 1.
RetainedDims retained_dims(const SpaceSpec& spec, const SparsityConfig& config, int layer);

/// Every gene drawn independently and uniformly from its candidate set.
SparsityConfig sample_uniform(const SpaceSpec& spec, Rng& rng);

/// Token sequence [a1, f1, a2, f2, ...]: attention index i -> token i, FFN
/// index j -> token num_heads + j.
std::vector<int> encode_tokens(const SpaceSpec& spec, const SparsityConfig& config);
SparsityConfig decode_tokens(const SpaceSpec& spec, std::span<const int> tokens);

/// Calls fn on every config of the space in odometer order.
void for_each_config(const SpaceSpec& spec, const std::function<void(const SparsityConfig&)>& fn);

/// Shortest decimal that round-trips the double, e.g. 0.25 or 0.37.
std::string format_fraction(double value);

/// Flat record "a1,f1,a2,f2,...".
std::string format_config(const SpaceSpec& spec, const SparsityConfig& config);
SparsityConfig parse_config(const SpaceSpec& spec, std::string_view text);
/// Header "a1,f1,...,aL,fL".
std::string config_csv_header(const SpaceSpec& spec);

}  // namespace layerprune
