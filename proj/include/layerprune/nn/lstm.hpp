#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <vector>

namespace layerprune::nn {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Single LSTM layer. Gate rows are stacked as [input, forget, cell, output].
template <typename Scalar>
struct LstmParams {
  Mat<Scalar> w_ih;  // 4H x In
  Mat<Scalar> w_hh;  // 4H x H
  Vec<Scalar> bias;  // 4H

  LstmParams() = default;
  LstmParams(int input, int hidden)
      : w_ih(Mat<Scalar>::Zero(4 * hidden, input)),
        w_hh(Mat<Scalar>::Zero(4 * hidden, hidden)),
        bias(Vec<Scalar>::Zero(4 * hidden)) {}

  int hidden() const { return static_cast<int>(w_hh.cols()); }
  int input() const { return static_cast<int>(w_ih.cols()); }

  void set_zero() {
    w_ih.setZero();
    w_hh.setZero();
    bias.setZero();
  }
};

/// Activations of one forward pass, enough to run backprop through time.
/// h and c hold T+1 entries; index 0 is the zero initial state.
template <typename Scalar>
struct LstmTrace {
  std::vector<Vec<Scalar>> x, h, c, in, forget, cell, out, tanh_c;
};

template <typename Scalar>
Scalar sigmoid(Scalar v) {
  return Scalar(1) / (Scalar(1) + std::exp(-v));
}

/// Runs the layer from zero state over xs and returns h_1..h_T.
template <typename Scalar>
std::vector<Vec<Scalar>> lstm_forward(const LstmParams<Scalar>& p, const std::vector<Vec<Scalar>>& xs,
                                      LstmTrace<Scalar>& trace) {
  const int hsz = p.hidden();
  trace = LstmTrace<Scalar>{};
  trace.x = xs;
  trace.h.push_back(Vec<Scalar>::Zero(hsz));
  trace.c.push_back(Vec<Scalar>::Zero(hsz));
  std::vector<Vec<Scalar>> outputs;
  outputs.reserve(xs.size());
  for (const auto& x : xs) {
    const Vec<Scalar> z = p.w_ih * x + p.w_hh * trace.h.back() + p.bias;
    Vec<Scalar> i = z.segment(0, hsz).unaryExpr([](Scalar v) { return sigmoid(v); });
    Vec<Scalar> f = z.segment(hsz, hsz).unaryExpr([](Scalar v) { return sigmoid(v); });
    Vec<Scalar> g = z.segment(2 * hsz, hsz).array().tanh();
    Vec<Scalar> o = z.segment(3 * hsz, hsz).unaryExpr([](Scalar v) { return sigmoid(v); });
    Vec<Scalar> c = f.cwiseProduct(trace.c.back()) + i.cwiseProduct(g);
    Vec<Scalar> tc = c.array().tanh();
    Vec<Scalar> h = o.cwiseProduct(tc);
    trace.in.push_back(std::move(i));
    trace.forget.push_back(std::move(f));
    trace.cell.push_back(std::move(g));
    trace.out.push_back(std::move(o));
    trace.c.push_back(std::move(c));
    trace.tanh_c.push_back(std::move(tc));
    trace.h.push_back(h);
    outputs.push_back(std::move(h));
  }
  return outputs;
}

/// Backprop through time. d_h[t] is the loss gradient flowing into output t
/// from above. Parameter gradients are accumulated into `grad`; the returned
/// vector holds the gradient with respect to each input.
template <typename Scalar>
std::vector<Vec<Scalar>> lstm_backward(const LstmParams<Scalar>& p, const LstmTrace<Scalar>& trace,
                                       const std::vector<Vec<Scalar>>& d_h, LstmParams<Scalar>& grad) {
  const int hsz = p.hidden();
  const int steps = static_cast<int>(trace.x.size());
  std::vector<Vec<Scalar>> d_x(steps);
  Vec<Scalar> dh_next = Vec<Scalar>::Zero(hsz);
  Vec<Scalar> dc_next = Vec<Scalar>::Zero(hsz);
  Vec<Scalar> dz(4 * hsz);
  for (int t = steps - 1; t >= 0; --t) {
    const Vec<Scalar> dh = d_h[t] + dh_next;
    const auto& i = trace.in[t];
    const auto& f = trace.forget[t];
    const auto& g = trace.cell[t];
    const auto& o = trace.out[t];
    const auto& tc = trace.tanh_c[t];
    const Vec<Scalar> dc = dc_next + dh.cwiseProduct(o).cwiseProduct((Scalar(1) - tc.array().square()).matrix());
    dz.segment(0, hsz) = dc.cwiseProduct(g).cwiseProduct((i.array() * (Scalar(1) - i.array())).matrix());
    dz.segment(hsz, hsz) =
        dc.cwiseProduct(trace.c[t]).cwiseProduct((f.array() * (Scalar(1) - f.array())).matrix());
    dz.segment(2 * hsz, hsz) = dc.cwiseProduct(i).cwiseProduct((Scalar(1) - g.array().square()).matrix());
    dz.segment(3 * hsz, hsz) = dh.cwiseProduct(tc).cwiseProduct((o.array() * (Scalar(1) - o.array())).matrix());
    grad.w_ih.noalias() += dz * trace.x[t].transpose();
    grad.w_hh.noalias() += dz * trace.h[t].transpose();
    grad.bias += dz;
    d_x[t].noalias() = p.w_ih.transpose() * dz;
    dh_next.noalias() = p.w_hh.transpose() * dz;
    dc_next = dc.cwiseProduct(f);
  }
  return d_x;
}

/// Log-softmax over entries where `allowed` is true; disallowed entries get
/// -infinity. An empty mask allows everything.
template <typename Scalar>
Vec<Scalar> log_softmax(const Vec<Scalar>& logits, const std::vector<bool>& allowed = {}) {
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  Scalar top = neg_inf;
  for (Eigen::Index k = 0; k < logits.size(); ++k) {
    if (allowed.empty() || allowed[k]) top = std::max(top, logits(k));
  }
  Scalar sum = 0;
  for (Eigen::Index k = 0; k < logits.size(); ++k) {
    if (allowed.empty() || allowed[k]) sum += std::exp(logits(k) - top);
  }
  const Scalar log_z = top + std::log(sum);
  Vec<Scalar> out(logits.size());
  for (Eigen::Index k = 0; k < logits.size(); ++k) {
    out(k) = (allowed.empty() || allowed[k]) ? logits(k) - log_z : neg_inf;
  }
  return out;
}

/// exp() of log-probabilities with masked (-inf) entries mapped to exactly 0.
template <typename Scalar>
Vec<Scalar> probabilities(const Vec<Scalar>& log_probs) {
  return log_probs.unaryExpr([](Scalar x) { return std::isinf(x) ? Scalar(0) : std::exp(x); });
}

/// Inverse-CDF draw from a probability vector.
template <typename Scalar, typename Urbg>
int sample_categorical(const Vec<Scalar>& probs, Urbg& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);
  double acc = 0.0;
  int last = -1;
  for (Eigen::Index k = 0; k < probs.size(); ++k) {
    if (!(probs(k) > 0)) continue;
    acc += static_cast<double>(probs(k));
    last = static_cast<int>(k);
    if (u < acc) return last;
  }
  return last;
}

}  // namespace layerprune::nn
