#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

namespace layerprune {

struct ForestOptions {
  int num_trees = 100;
  int max_depth = 12;
  int min_leaf = 2;
  bool bootstrap = true;
  /// Features tried per split; 0 means all of them.
  int max_features = 0;
};

/// CART regression tree splitting on squared error. Rows of X are samples.
template <typename Scalar>
class RegressionTree {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  struct Node {
    int feature = -1;  // -1 marks a leaf
    Scalar threshold = 0;
    int left = -1;
    int right = -1;
    Scalar value = 0;
  };

  RegressionTree() = default;
  explicit RegressionTree(std::vector<Node> nodes) : nodes_(std::move(nodes)) {}

  /// Fits on the multiset of rows in `rows` (repeats allowed for bootstrap).
  template <typename Urbg>
  void fit(const Matrix& x, const Vector& y, std::vector<int> rows, const ForestOptions& opts, Urbg& rng) {
    if (rows.empty()) throw std::invalid_argument("cannot fit a tree on zero rows");
    nodes_.clear();
    build(x, y, rows, 0, static_cast<int>(rows.size()), 0, opts, rng);
  }

  template <typename Derived>
  Scalar predict(const Eigen::MatrixBase<Derived>& row) const {
    if (nodes_.empty()) throw std::logic_error("predict on an unfitted tree");
    int n = 0;
    while (nodes_[n].feature >= 0) {
      n = row(nodes_[n].feature) <= nodes_[n].threshold ? nodes_[n].left : nodes_[n].right;
    }
    return nodes_[n].value;
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  int depth() const { return depth_of(0); }

 private:
  int depth_of(int n) const {
    if (nodes_.empty() || nodes_[n].feature < 0) return 0;
    return 1 + std::max(depth_of(nodes_[n].left), depth_of(nodes_[n].right));
  }

  // Builds the subtree over rows[begin, end) and returns its node index.
  template <typename Urbg>
  int build(const Matrix& x, const Vector& y, std::vector<int>& rows, int begin, int end, int depth,
            const ForestOptions& opts, Urbg& rng) {
    const int n = end - begin;
    Scalar sum = 0, sum_sq = 0;
    for (int i = begin; i < end; ++i) {
      sum += y(rows[i]);
      sum_sq += y(rows[i]) * y(rows[i]);
    }
    const int index = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{-1, 0, -1, -1, sum / n});
    const Scalar sse = sum_sq - sum * sum / n;
    if (depth >= opts.max_depth || n < 2 * opts.min_leaf || !(sse > Scalar(1e-12) * std::max<Scalar>(1, sum_sq))) {
      return index;
    }

    std::vector<int> features(x.cols());
    std::iota(features.begin(), features.end(), 0);
    int tried = static_cast<int>(features.size());
    if (opts.max_features > 0 && opts.max_features < tried) {
      for (int k = 0; k < opts.max_features; ++k) {
        std::uniform_int_distribution<int> pick(k, tried - 1);
        std::swap(features[k], features[pick(rng)]);
      }
      tried = opts.max_features;
    }

    int best_feature = -1;
    Scalar best_threshold = 0;
    Scalar best_score = sse;
    std::vector<int> order(rows.begin() + begin, rows.begin() + end);
    for (int k = 0; k < tried; ++k) {
      const int f = features[k];
      std::sort(order.begin(), order.end(), [&](int a, int b) { return x(a, f) < x(b, f); });
      Scalar left_sum = 0, left_sq = 0;
      for (int i = 0; i + 1 < n; ++i) {
        const Scalar v = y(order[i]);
        left_sum += v;
        left_sq += v * v;
        const int left_n = i + 1;
        const int right_n = n - left_n;
        if (left_n < opts.min_leaf || right_n < opts.min_leaf) continue;
        const Scalar a = x(order[i], f), b = x(order[i + 1], f);
        if (!(a < b)) continue;
        const Scalar right_sum = sum - left_sum;
        const Scalar right_sq = sum_sq - left_sq;
        const Scalar score =
            (left_sq - left_sum * left_sum / left_n) + (right_sq - right_sum * right_sum / right_n);
        if (score < best_score) {
          best_score = score;
          best_feature = f;
          best_threshold = a + (b - a) / 2;
        }
      }
    }
    if (best_feature < 0) return index;

    auto mid = std::stable_partition(rows.begin() + begin, rows.begin() + end,
                                     [&](int r) { return x(r, best_feature) <= best_threshold; });
    const int split = static_cast<int>(mid - rows.begin());
    const int left = build(x, y, rows, begin, split, depth + 1, opts, rng);
    const int right = build(x, y, rows, split, end, depth + 1, opts, rng);
    nodes_[index].feature = best_feature;
    nodes_[index].threshold = best_threshold;
    nodes_[index].left = left;
    nodes_[index].right = right;
    return index;
  }

  std::vector<Node> nodes_;
};

/// Bagged ensemble of regression trees; prediction is the mean over trees.
/// Each tree draws from its own generator seeded by (seed, tree index), so the
/// fit does not depend on the order trees are built in.
template <typename Scalar>
class RandomForest {
 public:
  using Tree = RegressionTree<Scalar>;
  using Matrix = typename Tree::Matrix;
  using Vector = typename Tree::Vector;

  RandomForest() = default;
  explicit RandomForest(std::vector<Tree> trees) : trees_(std::move(trees)) {}

  void fit(const Matrix& x, const Vector& y, const ForestOptions& opts, std::uint64_t seed) {
    if (x.rows() != y.size() || x.rows() == 0) throw std::invalid_argument("forest fit: bad shapes");
    if (opts.num_trees <= 0 || opts.min_leaf <= 0 || opts.max_depth < 0) {
      throw std::invalid_argument("forest fit: bad options");
    }
    const int n = static_cast<int>(x.rows());
    trees_.assign(opts.num_trees, Tree{});
    for (int t = 0; t < opts.num_trees; ++t) {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(t)};
      std::mt19937_64 rng(seq);
      std::vector<int> rows(n);
      if (opts.bootstrap) {
        std::uniform_int_distribution<int> pick(0, n - 1);
        for (int& r : rows) r = pick(rng);
      } else {
        std::iota(rows.begin(), rows.end(), 0);
      }
      trees_[t].fit(x, y, std::move(rows), opts, rng);
    }
  }

  template <typename Derived>
  Scalar predict(const Eigen::MatrixBase<Derived>& row) const {
    if (trees_.empty()) throw std::logic_error("predict on an unfitted forest");
    Scalar sum = 0;
    for (const auto& t : trees_) sum += t.predict(row);
    return sum / static_cast<Scalar>(trees_.size());
  }

  bool fitted() const { return !trees_.empty(); }
  const std::vector<Tree>& trees() const { return trees_; }

 private:
  std::vector<Tree> trees_;
};

}  // namespace layerprune
