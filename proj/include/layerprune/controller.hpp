#pragma once

#include "layerprune/nn/lstm.hpp"
#include "layerprune/search_space.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace layerprune {

struct ControllerOptions {
  int embed_dim = 64;
  int encoder_hidden = 100;
  int mutator_hidden = 100;
  int mutator_layers = 2;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double baseline_decay = 0.95;
  double init_scale = 0.1;
  /// When false the sparsity head never proposes the gene's current value.
  bool allow_noop_mutation = false;

  void validate() const;
};

/// Every trainable tensor of the two-stage mutator. The same layout holds
/// gradients and optimizer moments.
struct ControllerParams {
  Eigen::MatrixXd embedding;  // vocab x embed, one row per sparsity token
  nn::LstmParams<double> encoder_fwd;
  nn::LstmParams<double> encoder_bwd;
  Eigen::MatrixXd layer_head_w;  // genes x 2*encoder_hidden
  Eigen::VectorXd layer_head_b;
  Eigen::MatrixXd position_embedding;  // genes x embed
  std::vector<nn::LstmParams<double>> mutator_lstm;
  Eigen::MatrixXd attn_head_w;  // num_heads x mutator_hidden
  Eigen::VectorXd attn_head_b;
  Eigen::MatrixXd ffn_head_w;  // ffn_steps x mutator_hidden
  Eigen::VectorXd ffn_head_b;

  static ControllerParams zeros(const SpaceSpec& spec, const ControllerOptions& opts);
  void set_zero();
  std::int64_t size() const;
};

/// Calls f(group_name, tensor_a, tensor_b, ...) for each tensor in a fixed
/// order, walking any number of identically shaped parameter sets in step.
template <typename F, typename First, typename... Rest>
void visit_tensors(F&& f, First& first, Rest&... rest) {
  auto lstm = [&](const std::string& name, auto& a, auto&... b) {
    f(name + ".w_ih", a.w_ih, b.w_ih...);
    f(name + ".w_hh", a.w_hh, b.w_hh...);
    f(name + ".bias", a.bias, b.bias...);
  };
  f("embedding", first.embedding, rest.embedding...);
  lstm("encoder_fwd", first.encoder_fwd, rest.encoder_fwd...);
  lstm("encoder_bwd", first.encoder_bwd, rest.encoder_bwd...);
  f("layer_head.w", first.layer_head_w, rest.layer_head_w...);
  f("layer_head.b", first.layer_head_b, rest.layer_head_b...);
  f("position_embedding", first.position_embedding, rest.position_embedding...);
  for (std::size_t l = 0; l < first.mutator_lstm.size(); ++l) {
    lstm("mutator_lstm" + std::to_string(l), first.mutator_lstm[l], rest.mutator_lstm[l]...);
  }
  f("attn_head.w", first.attn_head_w, rest.attn_head_w...);
  f("attn_head.b", first.attn_head_b, rest.attn_head_b...);
  f("ffn_head.w", first.ffn_head_w, rest.ffn_head_w...);
  f("ffn_head.b", first.ffn_head_b, rest.ffn_head_b...);
}

/// Which sublayer gene to mutate and its new candidate index.
struct MutationAction {
  int layer_pos = 0;
  int new_sparsity_index = 0;
  double log_prob = 0.0;
};

class ControllerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct UpdateResult {
  double reward = 0.0;
  double advantage = 0.0;
  bool skipped = false;  // non-finite gradient, no step taken
};

/// Reinforced mutator. Stage one embeds the parent's gene tokens, runs a
/// bidirectional LSTM and scores every gene position. Stage two feeds
/// (position embedding, current token embedding) through a stacked LSTM and
/// picks a new candidate from the attention or FFN head. Trained with
/// REINFORCE against a moving-average baseline and Adam.
class Controller {
 public:
  Controller(SpaceSpec spec, ControllerOptions options, std::uint64_t seed);

  const SpaceSpec& spec() const { return spec_; }
  const ControllerOptions& options() const { return options_; }
  const ControllerParams& params() const { return params_; }
  ControllerParams& mutable_params() { return params_; }
  std::int64_t step_count() const { return step_; }
  double baseline() const { return baseline_; }
  bool baseline_initialized() const { return baseline_initialized_; }
  std::int64_t skipped_updates() const { return skipped_; }

  /// Stage-one distribution over gene positions.
  Eigen::VectorXd layer_probabilities(const SparsityConfig& parent) const;
  /// Stage-two distribution over candidates of the gene at layer_pos.
  Eigen::VectorXd sparsity_probabilities(const SparsityConfig& parent, int layer_pos) const;

  MutationAction forward_sample(const SparsityConfig& parent, Rng& rng) const;
  /// log p(layer_pos) + log p(index | layer_pos), recomputed from scratch.
  double log_prob(const SparsityConfig& parent, const MutationAction& action) const;
  /// Gradient of log_prob with respect to every parameter.
  ControllerParams log_prob_gradient(const SparsityConfig& parent, const MutationAction& action) const;

  /// One policy-gradient ascent step on advantage * log_prob.
  UpdateResult reinforce_update(const SparsityConfig& parent, const MutationAction& action, double reward);

  void save(std::ostream& os) const;
  static Controller load(std::istream& is);
  void save(const std::filesystem::path& path) const;
  static Controller load(const std::filesystem::path& path);

  friend bool operator==(const Controller& a, const Controller& b);

 private:
  struct Stage1 {
    std::vector<int> tokens;
    std::vector<Eigen::VectorXd> inputs;
    nn::LstmTrace<double> fwd, bwd;
    Eigen::VectorXd encoded;
    Eigen::VectorXd log_probs;
  };
  struct Stage2 {
    int layer_pos = 0;
    int token = 0;
    std::vector<nn::LstmTrace<double>> traces;
    Eigen::VectorXd top;
    std::vector<bool> allowed;
    Eigen::VectorXd log_probs;
  };

  Stage1 run_stage1(const SparsityConfig& parent) const;
  Stage2 run_stage2(const SparsityConfig& parent, int layer_pos) const;
  void check_finite(const Eigen::VectorXd& v, const char* where) const;
  std::string dump_state() const;

  SpaceSpec spec_;
  ControllerOptions options_;
  ControllerParams params_;
  ControllerParams adam_m_;
  ControllerParams adam_v_;
  std::int64_t step_ = 0;
  double baseline_ = 0.0;
  bool baseline_initialized_ = false;
  std::int64_t skipped_ = 0;
};

/// Child equal to parent except for the mutated gene.
SparsityConfig apply_mutation(const SpaceSpec& spec, const SparsityConfig& parent, const MutationAction& action);

}  // namespace layerprune
