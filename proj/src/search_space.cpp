#include "layerprune/search_space.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

namespace layerprune {

namespace {

int fraction_to_index(double value, int count, const char* what) {
  if (!std::isfinite(value) || value < 0.0 || value >= 1.0) {
    throw std::invalid_argument(std::string(what) + " sparsity out of [0,1): " + format_fraction(value));
  }
  const double scaled = value * count;
  const int index = static_cast<int>(std::lround(scaled));
  if (index < 0 || index >= count || std::abs(scaled - index) > 1e-9 * count) {
    throw std::invalid_argument(std::string(what) + " sparsity " + format_fraction(value) +
                                " is not a candidate of the space");
  }
  return index;
}

std::vector<std::string_view> split_commas(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    out.push_back(text.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

void SpaceSpec::validate() const {
  if (num_layers <= 0 || num_heads <= 0 || ffn_dim <= 0 || ffn_steps <= 0) {
    throw std::invalid_argument("space spec fields must be positive: " + format_space_spec(*this));
  }
}

SpaceSpec parse_space_spec(std::string_view text) {
  const auto parts = split_commas(text);
  if (parts.size() != 4) {
    throw std::invalid_argument("space spec must be 'layers,heads,ffn_dim,ffn_steps', got '" +
                                std::string(text) + "'");
  }
  int values[4];
  for (int i = 0; i < 4; ++i) {
    const auto p = trim(parts[i]);
    auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), values[i]);
    if (ec != std::errc() || ptr != p.data() + p.size()) {
      throw std::invalid_argument("bad integer in space spec: '" + std::string(p) + "'");
    }
  }
  SpaceSpec spec{values[0], values[1], values[2], values[3]};
  spec.validate();
  return spec;
}

std::string format_space_spec(const SpaceSpec& spec) {
  std::ostringstream os;
  os << spec.num_layers << ',' << spec.num_heads << ',' << spec.ffn_dim << ',' << spec.ffn_steps;
  return os.str();
}

SparsityConfig::SparsityConfig(std::vector<int> attention_index, std::vector<int> ffn_index)
    : attention_(std::move(attention_index)), ffn_(std::move(ffn_index)) {
  if (attention_.size() != ffn_.size()) {
    throw std::invalid_argument("attention and FFN gene counts differ");
  }
}

SparsityConfig SparsityConfig::dense(const SpaceSpec& spec) {
  return SparsityConfig(std::vector<int>(spec.num_layers, 0), std::vector<int>(spec.num_layers, 0));
}

SparsityConfig SparsityConfig::from_fractions(const SpaceSpec& spec, std::span<const double> attention,
                                              std::span<const double> ffn) {
  if (attention.size() != static_cast<std::size_t>(spec.num_layers) || ffn.size() != attention.size()) {
    throw std::invalid_argument("expected " + std::to_string(spec.num_layers) +
                                " attention and FFN sparsities");
  }
  std::vector<int> a(attention.size()), f(ffn.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = fraction_to_index(attention[i], spec.num_heads, "attention");
    f[i] = fraction_to_index(ffn[i], spec.ffn_steps, "ffn");
  }
  return SparsityConfig(std::move(a), std::move(f));
}

int SparsityConfig::gene(int pos) const {
  if (pos < 0 || pos >= 2 * num_layers()) throw std::out_of_range("gene position out of range");
  return SpaceSpec::is_attention_pos(pos) ? attention_[pos / 2] : ffn_[pos / 2];
}

SparsityConfig SparsityConfig::with_gene(int pos, int index) const {
  if (pos < 0 || pos >= 2 * num_layers()) throw std::out_of_range("gene position out of range");
  SparsityConfig child = *this;
  (SpaceSpec::is_attention_pos(pos) ? child.attention_ : child.ffn_)[pos / 2] = index;
  return child;
}

double SparsityConfig::attention_sparsity(const SpaceSpec& spec, int layer) const {
  return static_cast<double>(attention_.at(layer)) / spec.num_heads;
}

double SparsityConfig::ffn_sparsity(const SpaceSpec& spec, int layer) const {
  return static_cast<double>(ffn_.at(layer)) / spec.ffn_steps;
}

void SparsityConfig::validate(const SpaceSpec& spec) const {
  if (num_layers() != spec.num_layers) {
    throw std::invalid_argument("config has " + std::to_string(num_layers()) + " layers, space has " +
                                std::to_string(spec.num_layers));
  }
  for (int i = 0; i < num_layers(); ++i) {
    if (attention_[i] < 0 || attention_[i] >= spec.num_heads) {
      throw std::invalid_argument("attention gene " + std::to_string(i) + " out of range");
    }
    if (ffn_[i] < 0 || ffn_[i] >= spec.ffn_steps) {
      throw std::invalid_argument("ffn gene " + std::to_string(i) + " out of range");
    }
  }
}

bool SparsityConfig::is_valid(const SpaceSpec& spec) const {
  try {
    validate(spec);
    return true;
  } catch (const std::invalid_argument&) {
    return false;
  }
}

std::size_t SparsityConfigHash::operator()(const SparsityConfig& c) const noexcept {
  // FNV-1a over the gene indices.
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](int v) {
    for (int b = 0; b < 4; ++b) {
      h ^= static_cast<std::uint64_t>((static_cast<unsigned>(v) >> (8 * b)) & 0xffu);
      h *= 1099511628211ull;
    }
  };
  for (int i = 0; i < c.num_layers(); ++i) {
    mix(c.attention_index()[i]);
    mix(c.ffn_index()[i]);
  }
  return static_cast<std::size_t>(h);
}

std::uint64_t space_size(const SpaceSpec& spec) {
  spec.validate();
  std::uint64_t per_layer = 0;
  if (__builtin_mul_overflow(static_cast<std::uint64_t>(spec.num_heads),
                             static_cast<std::uint64_t>(spec.ffn_steps), &per_layer)) {
    throw std::overflow_error("space size overflows 64 bits");
  }
  std::uint64_t total = 1;
  for (int i = 0; i < spec.num_layers; ++i) {
    if (__builtin_mul_overflow(total, per_layer, &total)) {
      throw std::overflow_error("space size overflows 64 bits: " + format_space_spec(spec));
    }
  }
  return total;
}

RetainedDims retained_dims(const SpaceSpec& spec, const SparsityConfig& config, int layer) {
  if (layer < 0 || layer >= spec.num_layers || layer >= config.num_layers()) {
    throw std::out_of_range("layer " + std::to_string(layer) + " out of range");
  }
  RetainedDims out;
  out.heads = spec.num_heads - config.attention_index()[layer];
  // Exact round-half-even of (steps - j) * ffn_dim / steps.
  const std::int64_t num = static_cast<std::int64_t>(spec.ffn_steps - config.ffn_index()[layer]) * spec.ffn_dim;
  std::int64_t q = num / spec.ffn_steps;
  const std::int64_t twice_rem = 2 * (num % spec.ffn_steps);
  if (twice_rem > spec.ffn_steps || (twice_rem == spec.ffn_steps && (q % 2) == 1)) ++q;
  out.ffn = static_cast<int>(std::max<std::int64_t>(1, q));
  return out;
}

SparsityConfig sample_uniform(const SpaceSpec& spec, Rng& rng) {
  std::uniform_int_distribution<int> head_dist(0, spec.num_heads - 1);
  std::uniform_int_distribution<int> ffn_dist(0, spec.ffn_steps - 1);
  std::vector<int> a(spec.num_layers), f(spec.num_layers);
  for (int i = 0; i < spec.num_layers; ++i) {
    a[i] = head_dist(rng);
    f[i] = ffn_dist(rng);
  }
  return SparsityConfig(std::move(a), std::move(f));
}

std::vector<int> encode_tokens(const SpaceSpec& spec, const SparsityConfig& config) {
  config.validate(spec);
  std::vector<int> tokens;
  tokens.reserve(spec.num_genes());
  for (int i = 0; i < spec.num_layers; ++i) {
    tokens.push_back(config.attention_index()[i]);
    tokens.push_back(spec.num_heads + config.ffn_index()[i]);
  }
  return tokens;
}

SparsityConfig decode_tokens(const SpaceSpec& spec, std::span<const int> tokens) {
  if (tokens.size() != static_cast<std::size_t>(spec.num_genes())) {
    throw std::invalid_argument("token sequence length mismatch");
  }
  std::vector<int> a(spec.num_layers), f(spec.num_layers);
  for (int i = 0; i < spec.num_layers; ++i) {
    a[i] = tokens[2 * i];
    f[i] = tokens[2 * i + 1] - spec.num_heads;
  }
  SparsityConfig config(std::move(a), std::move(f));
  config.validate(spec);
  return config;
}

void for_each_config(const SpaceSpec& spec, const std::function<void(const SparsityConfig&)>& fn) {
  spec.validate();
  std::vector<int> genes(spec.num_genes(), 0);
  while (true) {
    std::vector<int> a(spec.num_layers), f(spec.num_layers);
    for (int i = 0; i < spec.num_layers; ++i) {
      a[i] = genes[2 * i];
      f[i] = genes[2 * i + 1];
    }
    fn(SparsityConfig(std::move(a), std::move(f)));
    int pos = spec.num_genes() - 1;
    while (pos >= 0) {
      if (++genes[pos] < spec.candidates_at(pos)) break;
      genes[pos--] = 0;
    }
    if (pos < 0) return;
  }
}

std::string format_fraction(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

std::string format_config(const SpaceSpec& spec, const SparsityConfig& config) {
  config.validate(spec);
  std::string out;
  for (int i = 0; i < spec.num_layers; ++i) {
    if (i) out += ',';
    out += format_fraction(config.attention_sparsity(spec, i));
    out += ',';
    out += format_fraction(config.ffn_sparsity(spec, i));
  }
  return out;
}

SparsityConfig parse_config(const SpaceSpec& spec, std::string_view text) {
  const auto parts = split_commas(text);
  if (parts.size() != static_cast<std::size_t>(spec.num_genes())) {
    throw std::invalid_argument("expected " + std::to_string(spec.num_genes()) + " fields, got " +
                                std::to_string(parts.size()));
  }
  std::vector<double> a(spec.num_layers), f(spec.num_layers);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto p = trim(parts[i]);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), v);
    if (ec != std::errc() || ptr != p.data() + p.size()) {
      throw std::invalid_argument("non-numeric sparsity '" + std::string(p) + "'");
    }
    (i % 2 == 0 ? a : f)[i / 2] = v;
  }
  return SparsityConfig::from_fractions(spec, a, f);
}

std::string config_csv_header(const SpaceSpec& spec) {
  std::string out;
  for (int i = 1; i <= spec.num_layers; ++i) {
    if (i > 1) out += ',';
    out += "a" + std::to_string(i) + ",f" + std::to_string(i);
  }
  return out;
}

}  // namespace layerprune
