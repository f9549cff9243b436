#include "layerprune/controller.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <istream>
#include <ostream>
#include <sstream>

namespace layerprune {

namespace {

constexpr char kCheckpointMagic[8] = {'L', 'P', 'C', 'T', 'R', 'L', '\0', '\1'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("controller checkpoint truncated");
  return v;
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace

void ControllerOptions::validate() const {
  if (embed_dim <= 0 || encoder_hidden <= 0 || mutator_hidden <= 0 || mutator_layers <= 0) {
    throw std::invalid_argument("controller dimensions must be positive");
  }
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) throw std::invalid_argument("baseline decay must lie in [0, 1)");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (!(init_scale >= 0.0)) throw std::invalid_argument("init scale must be nonnegative");
}

ControllerParams ControllerParams::zeros(const SpaceSpec& spec, const ControllerOptions& o) {
  ControllerParams p;
  const int genes = spec.num_genes();
  p.embedding = Eigen::MatrixXd::Zero(spec.vocab_size(), o.embed_dim);
  p.encoder_fwd = nn::LstmParams<double>(o.embed_dim, o.encoder_hidden);
  p.encoder_bwd = nn::LstmParams<double>(o.embed_dim, o.encoder_hidden);
  p.layer_head_w = Eigen::MatrixXd::Zero(genes, 2 * o.encoder_hidden);
  p.layer_head_b = Eigen::VectorXd::Zero(genes);
  p.position_embedding = Eigen::MatrixXd::Zero(genes, o.embed_dim);
  for (int l = 0; l < o.mutator_layers; ++l) {
    p.mutator_lstm.emplace_back(l == 0 ? o.embed_dim : o.mutator_hidden, o.mutator_hidden);
  }
  p.attn_head_w = Eigen::MatrixXd::Zero(spec.num_heads, o.mutator_hidden);
  p.attn_head_b = Eigen::VectorXd::Zero(spec.num_heads);
  p.ffn_head_w = Eigen::MatrixXd::Zero(spec.ffn_steps, o.mutator_hidden);
  p.ffn_head_b = Eigen::VectorXd::Zero(spec.ffn_steps);
  return p;
}

void ControllerParams::set_zero() {
  visit_tensors([](const std::string&, auto& t) { t.setZero(); }, *this);
}

std::int64_t ControllerParams::size() const {
  std::int64_t n = 0;
  visit_tensors([&n](const std::string&, const auto& t) { n += t.size(); }, *this);
  return n;
}

Controller::Controller(SpaceSpec spec, ControllerOptions options, std::uint64_t seed)
    : spec_(spec), options_(options) {
  spec_.validate();
  options_.validate();
  params_ = ControllerParams::zeros(spec_, options_);
  adam_m_ = params_;
  adam_v_ = params_;
  Rng rng(seed);
  std::uniform_real_distribution<double> init(-options_.init_scale, options_.init_scale);
  visit_tensors(
      [&](const std::string&, auto& t) {
        for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = init(rng);
      },
      params_);
}

Controller::Stage1 Controller::run_stage1(const SparsityConfig& parent) const {
  Stage1 s;
  s.tokens = encode_tokens(spec_, parent);
  for (int tok : s.tokens) s.inputs.push_back(params_.embedding.row(tok).transpose());
  const auto fwd_out = nn::lstm_forward(params_.encoder_fwd, s.inputs, s.fwd);
  const std::vector<Eigen::VectorXd> reversed(s.inputs.rbegin(), s.inputs.rend());
  const auto bwd_out = nn::lstm_forward(params_.encoder_bwd, reversed, s.bwd);
  s.encoded.resize(2 * options_.encoder_hidden);
  s.encoded << fwd_out.back(), bwd_out.back();
  const Eigen::VectorXd logits = params_.layer_head_w * s.encoded + params_.layer_head_b;
  check_finite(logits, "layer head logits");
  s.log_probs = nn::log_softmax<double>(logits);
  return s;
}

Controller::Stage2 Controller::run_stage2(const SparsityConfig& parent, int layer_pos) const {
  if (layer_pos < 0 || layer_pos >= spec_.num_genes()) throw std::out_of_range("layer position out of range");
  Stage2 s;
  s.layer_pos = layer_pos;
  const bool attention = SpaceSpec::is_attention_pos(layer_pos);
  const int current = parent.gene(layer_pos);
  s.token = attention ? current : spec_.num_heads + current;
  std::vector<Eigen::VectorXd> seq{params_.position_embedding.row(layer_pos).transpose(),
                                   params_.embedding.row(s.token).transpose()};
  s.traces.resize(params_.mutator_lstm.size());
  for (std::size_t l = 0; l < params_.mutator_lstm.size(); ++l) {
    seq = nn::lstm_forward(params_.mutator_lstm[l], seq, s.traces[l]);
  }
  s.top = seq.back();
  const Eigen::VectorXd logits = attention ? Eigen::VectorXd(params_.attn_head_w * s.top + params_.attn_head_b)
                                           : Eigen::VectorXd(params_.ffn_head_w * s.top + params_.ffn_head_b);
  check_finite(logits, "sparsity head logits");
  const int count = static_cast<int>(logits.size());
  if (!options_.allow_noop_mutation && count > 1) {
    s.allowed.assign(count, true);
    s.allowed[current] = false;
  }
  s.log_probs = nn::log_softmax<double>(logits, s.allowed);
  return s;
}

void Controller::check_finite(const Eigen::VectorXd& v, const char* where) const {
  if (!v.allFinite()) {
    throw ControllerError(std::string("non-finite controller activations in ") + where + "\n" + dump_state());
  }
}

std::string Controller::dump_state() const {
  std::ostringstream os;
  os << "controller state at step " << step_ << ", baseline " << baseline_ << ":\n";
  visit_tensors(
      [&os](const std::string& name, const auto& t) {
        os << "  " << name << " [" << t.rows() << "x" << t.cols() << "] norm=" << t.norm()
           << (t.allFinite() ? "" : " NON-FINITE") << '\n';
      },
      params_);
  return os.str();
}

Eigen::VectorXd Controller::layer_probabilities(const SparsityConfig& parent) const {
  return nn::probabilities<double>(run_stage1(parent).log_probs);
}

Eigen::VectorXd Controller::sparsity_probabilities(const SparsityConfig& parent, int layer_pos) const {
  return nn::probabilities<double>(run_stage2(parent, layer_pos).log_probs);
}

MutationAction Controller::forward_sample(const SparsityConfig& parent, Rng& rng) const {
  const Stage1 s1 = run_stage1(parent);
  MutationAction action;
  action.layer_pos = nn::sample_categorical<double>(nn::probabilities<double>(s1.log_probs), rng);
  const Stage2 s2 = run_stage2(parent, action.layer_pos);
  action.new_sparsity_index = nn::sample_categorical<double>(nn::probabilities<double>(s2.log_probs), rng);
  action.log_prob = s1.log_probs(action.layer_pos) + s2.log_probs(action.new_sparsity_index);
  return action;
}

double Controller::log_prob(const SparsityConfig& parent, const MutationAction& action) const {
  return run_stage1(parent).log_probs(action.layer_pos) +
         run_stage2(parent, action.layer_pos).log_probs(action.new_sparsity_index);
}

ControllerParams Controller::log_prob_gradient(const SparsityConfig& parent, const MutationAction& action) const {
  ControllerParams grad = ControllerParams::zeros(spec_, options_);
  const int hidden = options_.encoder_hidden;

  // Stage one: d log p / d logits = onehot - p.
  const Stage1 s1 = run_stage1(parent);
  Eigen::VectorXd d_logits1 = -nn::probabilities<double>(s1.log_probs);
  d_logits1(action.layer_pos) += 1.0;
  grad.layer_head_w.noalias() += d_logits1 * s1.encoded.transpose();
  grad.layer_head_b += d_logits1;
  const Eigen::VectorXd d_encoded = params_.layer_head_w.transpose() * d_logits1;

  const int steps = static_cast<int>(s1.inputs.size());
  std::vector<Eigen::VectorXd> d_fwd(steps, Eigen::VectorXd::Zero(hidden));
  std::vector<Eigen::VectorXd> d_bwd(steps, Eigen::VectorXd::Zero(hidden));
  d_fwd.back() = d_encoded.head(hidden);
  d_bwd.back() = d_encoded.tail(hidden);
  const auto dx_fwd = nn::lstm_backward(params_.encoder_fwd, s1.fwd, d_fwd, grad.encoder_fwd);
  const auto dx_bwd = nn::lstm_backward(params_.encoder_bwd, s1.bwd, d_bwd, grad.encoder_bwd);
  for (int t = 0; t < steps; ++t) {
    grad.embedding.row(s1.tokens[t]) += (dx_fwd[t] + dx_bwd[steps - 1 - t]).transpose();
  }

  // Stage two.
  const Stage2 s2 = run_stage2(parent, action.layer_pos);
  Eigen::VectorXd d_logits2 = -nn::probabilities<double>(s2.log_probs);
  d_logits2(action.new_sparsity_index) += 1.0;
  const bool attention = SpaceSpec::is_attention_pos(action.layer_pos);
  auto& head_w = attention ? grad.attn_head_w : grad.ffn_head_w;
  auto& head_b = attention ? grad.attn_head_b : grad.ffn_head_b;
  head_w.noalias() += d_logits2 * s2.top.transpose();
  head_b += d_logits2;
  const Eigen::VectorXd d_top =
      (attention ? params_.attn_head_w : params_.ffn_head_w).transpose() * d_logits2;

  std::vector<Eigen::VectorXd> d_seq(2, Eigen::VectorXd::Zero(options_.mutator_hidden));
  d_seq.back() = d_top;
  for (int l = static_cast<int>(params_.mutator_lstm.size()) - 1; l >= 0; --l) {
    d_seq = nn::lstm_backward(params_.mutator_lstm[l], s2.traces[l], d_seq, grad.mutator_lstm[l]);
  }
  grad.position_embedding.row(action.layer_pos) += d_seq[0].transpose();
  grad.embedding.row(s2.token) += d_seq[1].transpose();
  return grad;
}

UpdateResult Controller::reinforce_update(const SparsityConfig& parent, const MutationAction& action,
                                          double reward) {
  UpdateResult result;
  result.reward = reward;
  if (!baseline_initialized_) {
    baseline_ = reward;
    baseline_initialized_ = true;
  }
  result.advantage = reward - baseline_;
  ++step_;
  if (result.advantage != 0.0) {
    const ControllerParams grad = log_prob_gradient(parent, action);
    bool finite = std::isfinite(result.advantage);
    visit_tensors([&finite](const std::string&, const auto& g) { finite = finite && all_finite(g); }, grad);
    if (!finite) {
      ++skipped_;
      result.skipped = true;
      std::cerr << "controller: non-finite gradient at step " << step_ << ", update skipped\n";
    } else {
      const double adv = result.advantage;
      const double b1 = options_.adam_beta1, b2 = options_.adam_beta2;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
      const double lr = options_.learning_rate, eps = options_.adam_epsilon;
      visit_tensors(
          [&](const std::string&, auto& p, const auto& g, auto& m, auto& v) {
            m = b1 * m + (1.0 - b1) * adv * g;
            v.array() = b2 * v.array() + (1.0 - b2) * (adv * g.array()).square();
            p.array() += lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
          },
          params_, grad, adam_m_, adam_v_);
    }
  }
  baseline_ = options_.baseline_decay * baseline_ + (1.0 - options_.baseline_decay) * reward;
  return result;
}

void Controller::save(std::ostream& os) const {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put(os, kCheckpointVersion);
  for (int v : {spec_.num_layers, spec_.num_heads, spec_.ffn_dim, spec_.ffn_steps, options_.embed_dim,
                options_.encoder_hidden, options_.mutator_hidden, options_.mutator_layers}) {
    put<std::int32_t>(os, v);
  }
  for (double v : {options_.learning_rate, options_.adam_beta1, options_.adam_beta2, options_.adam_epsilon,
                   options_.baseline_decay, options_.init_scale}) {
    put(os, v);
  }
  put<std::uint8_t>(os, options_.allow_noop_mutation ? 1 : 0);
  put<std::int64_t>(os, step_);
  put<std::int64_t>(os, skipped_);
  put(os, baseline_);
  put<std::uint8_t>(os, baseline_initialized_ ? 1 : 0);
  auto write_set = [&os](const ControllerParams& set) {
    visit_tensors(
        [&os](const std::string&, const auto& t) {
          put<std::int64_t>(os, t.rows());
          put<std::int64_t>(os, t.cols());
          os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        },
        set);
  };
  write_set(params_);
  write_set(adam_m_);
  write_set(adam_v_);
}

Controller Controller::load(std::istream& is) {
  char magic[sizeof(kCheckpointMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("not a controller checkpoint");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported controller checkpoint version " + std::to_string(version));
  }
  SpaceSpec spec;
  ControllerOptions o;
  spec.num_layers = get<std::int32_t>(is);
  spec.num_heads = get<std::int32_t>(is);
  spec.ffn_dim = get<std::int32_t>(is);
  spec.ffn_steps = get<std::int32_t>(is);
  o.embed_dim = get<std::int32_t>(is);
  o.encoder_hidden = get<std::int32_t>(is);
  o.mutator_hidden = get<std::int32_t>(is);
  o.mutator_layers = get<std::int32_t>(is);
  o.learning_rate = get<double>(is);
  o.adam_beta1 = get<double>(is);
  o.adam_beta2 = get<double>(is);
  o.adam_epsilon = get<double>(is);
  o.baseline_decay = get<double>(is);
  o.init_scale = get<double>(is);
  o.allow_noop_mutation = get<std::uint8_t>(is) != 0;
  Controller c(spec, o, 0);
  c.step_ = get<std::int64_t>(is);
  c.skipped_ = get<std::int64_t>(is);
  c.baseline_ = get<double>(is);
  c.baseline_initialized_ = get<std::uint8_t>(is) != 0;
  auto read_set = [&is](ControllerParams& set) {
    visit_tensors(
        [&is](const std::string& name, auto& t) {
          const auto rows = get<std::int64_t>(is);
          const auto cols = get<std::int64_t>(is);
          if (rows != t.rows() || cols != t.cols()) {
            throw std::runtime_error("controller checkpoint shape mismatch in " + name);
          }
          if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
            throw std::runtime_error("controller checkpoint truncated in " + name);
          }
        },
        set);
  };
  read_set(c.params_);
  read_set(c.adam_m_);
  read_set(c.adam_v_);
  return c;
}

void Controller::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  save(os);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Controller Controller::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open controller checkpoint " + path.string());
  return load(is);
}

bool operator==(const Controller& a, const Controller& b) {
  if (!(a.spec_ == b.spec_) || a.step_ != b.step_ || a.skipped_ != b.skipped_ ||
      std::memcmp(&a.baseline_, &b.baseline_, sizeof(double)) != 0 ||
      a.baseline_initialized_ != b.baseline_initialized_) {
    return false;
  }
  bool same = true;
  auto bitwise = [&same](const std::string&, const auto& x, const auto& y) {
    same = same && x.rows() == y.rows() && x.cols() == y.cols() &&
           std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
  };
  visit_tensors(bitwise, a.params_, b.params_);
  visit_tensors(bitwise, a.adam_m_, b.adam_m_);
  visit_tensors(bitwise, a.adam_v_, b.adam_v_);
  return same;
}

SparsityConfig apply_mutation(const SpaceSpec& spec, const SparsityConfig& parent, const MutationAction& action) {
  parent.validate(spec);
  if (action.layer_pos < 0 || action.layer_pos >= spec.num_genes()) {
    throw std::invalid_argument("mutation targets gene position " + std::to_string(action.layer_pos) +
                                " outside the config");
  }
  if (action.new_sparsity_index < 0 || action.new_sparsity_index >= spec.candidates_at(action.layer_pos)) {
    throw std::invalid_argument("mutation index " + std::to_string(action.new_sparsity_index) +
                                " is not a candidate for gene position " + std::to_string(action.layer_pos));
  }
  return parent.with_gene(action.layer_pos, action.new_sparsity_index);
}

}  // namespace layerprune
