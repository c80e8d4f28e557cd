#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "omniquad/rng.hpp"

// Minimal dense network stack with exact manual gradients, templated on the
// scalar so the same code runs in float for training and in double for the
// finite-difference gradient suite.

namespace omniquad::nn {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct MlpSpec {
  std::vector<int> widths;  // input, hidden..., output; tanh hidden, linear output

  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
  int num_layers() const { return static_cast<int>(widths.size()) - 1; }

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("MlpSpec: need at least one layer");
    for (int w : widths)
      if (w <= 0) throw std::invalid_argument("MlpSpec: widths must be positive");
  }
};

// Orthogonal initialization: QR of a Gaussian matrix with the sign of the R
// diagonal folded in so the draw is unique, scaled by `gain`.
template <class S>
MatX<S> orthogonal(int rows, int cols, double gain, Rng& rng) {
  const bool wide = cols > rows;
  const int r = wide ? cols : rows, c = wide ? rows : cols;
  Eigen::MatrixXd a(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(r, c);
  const Eigen::MatrixXd rdiag = qr.matrixQR().topRows(c).template triangularView<Eigen::Upper>();
  for (int j = 0; j < c; ++j)
    if (rdiag(j, j) < 0.0) q.col(j) = -q.col(j);
  if (wide) q.transposeInPlace();
  return (gain * q).cast<S>();
}

// Flat, ordered set of parameter (or gradient, or moment) tensors. Biases are
// stored as single-column matrices so every tensor has the same type.
template <class S>
struct TensorList {
  std::vector<MatX<S>> tensors;

  TensorList<S> zeros_like() const {
    TensorList<S> out;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.emplace_back(MatX<S>::Zero(t.rows(), t.cols()));
    return out;
  }
  void set_zero() {
    for (auto& t : tensors) t.setZero();
  }
  void add_scaled(const TensorList<S>& other, S scale) {
    for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i] += scale * other.tensors[i];
  }
  void scale(S factor) {
    for (auto& t : tensors) t *= factor;
  }
  S squared_norm() const {
    S s = 0;
    for (const auto& t : tensors) s += t.squaredNorm();
    return s;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
  }
};

template <class S>
struct Mlp {
  MlpSpec spec;
  TensorList<S> params;  // w0, b0, w1, b1, ...

  const MatX<S>& w(int l) const { return params.tensors[2 * static_cast<std::size_t>(l)]; }
  const MatX<S>& b(int l) const { return params.tensors[2 * static_cast<std::size_t>(l) + 1]; }

  static Mlp init(const MlpSpec& spec, Rng& rng, double hidden_gain = std::sqrt(2.0),
                  double output_gain = 1.0) {
    spec.validate();
    Mlp m;
    m.spec = spec;
    for (int l = 0; l < spec.num_layers(); ++l) {
      const bool last = l == spec.num_layers() - 1;
      m.params.tensors.push_back(
          orthogonal<S>(spec.widths[l + 1], spec.widths[l], last ? output_gain : hidden_gain, rng));
      m.params.tensors.push_back(MatX<S>::Zero(spec.widths[l + 1], 1));
    }
    return m;
  }

  // Activations cached for the backward pass: the input plus every layer
  // output (post-tanh for hidden layers).
  struct Cache {
    MatX<S> input;
    std::vector<MatX<S>> acts;
  };

  // Columns of x are samples.
  MatX<S> forward(const MatX<S>& x, Cache* cache = nullptr) const {
    if (x.rows() != spec.input_dim())
      throw std::invalid_argument("Mlp::forward: input dim mismatch");
    if (cache) {
      cache->input = x;
      cache->acts.clear();
    }
    MatX<S> a = x;
    for (int l = 0; l < spec.num_layers(); ++l) {
      MatX<S> z = (w(l) * a).colwise() + b(l).col(0);
      if (l + 1 < spec.num_layers()) z = z.array().tanh();
      if (cache) cache->acts.push_back(z);
      a = std::move(z);
    }
    return a;
  }

  VecX<S> forward_one(const VecX<S>& x) const { return forward(MatX<S>(x)); }

  // Accumulates parameter gradients into `grads` (same layout as `params`)
  // and returns the gradient with respect to the input. `upstream` is dLoss/dOutput.
  MatX<S> backward(const Cache& cache, const MatX<S>& upstream, TensorList<S>& grads) const {
    const int n = spec.num_layers();
    MatX<S> dz = upstream;
    for (int l = n - 1; l >= 0; --l) {
      if (l < n - 1) dz = (dz.array() * (1.0 - cache.acts[static_cast<std::size_t>(l)].array().square())).matrix();
      const MatX<S>& below = l == 0 ? cache.input : cache.acts[static_cast<std::size_t>(l - 1)];
      grads.tensors[2 * static_cast<std::size_t>(l)].noalias() += dz * below.transpose();
      grads.tensors[2 * static_cast<std::size_t>(l) + 1].col(0).noalias() += dz.rowwise().sum();
      if (l > 0) dz = (w(l).transpose() * dz).eval();
    }
    return w(0).transpose() * dz;
  }
};

// Standard Adam with bias correction. One instance per parameter list; the
// step count is shared across the tensors it owns.
template <class S>
class Adam {
 public:
  Adam() = default;
  explicit Adam(const TensorList<S>& shape, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : m_(shape.zeros_like()), v_(shape.zeros_like()), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(TensorList<S>& params, const TensorList<S>& grads, double lr) {
    ++t_;
    const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
    const S corr1 = static_cast<S>(1.0 - std::pow(beta1_, t_));
    const S corr2 = static_cast<S>(1.0 - std::pow(beta2_, t_));
    const S alpha = static_cast<S>(lr);
    const S eps = static_cast<S>(eps_);
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      auto& m = m_.tensors[i];
      auto& v = v_.tensors[i];
      const auto& g = grads.tensors[i];
      m = b1 * m + (1 - b1) * g;
      v = (b2 * v).array() + (1 - b2) * g.array().square();
      params.tensors[i].array() -=
          alpha * (m.array() / corr1) / ((v.array() / corr2).sqrt() + eps);
    }
  }

  long step_count() const { return t_; }
  TensorList<S>& moments1() { return m_; }
  TensorList<S>& moments2() { return v_; }
  void set_step_count(long t) { t_ = t; }

 private:
  TensorList<S> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

// Rescales gradients so their global L2 norm is at most max_norm; returns the
// pre-clip norm.
template <class S>
double clip_grad_norm(std::vector<TensorList<S>*> grads, double max_norm) {
  double sq = 0.0;
  for (const auto* g : grads) sq += static_cast<double>(g->squared_norm());
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const S f = static_cast<S>(max_norm / norm);
    for (auto* g : grads) g->scale(f);
  }
  return norm;
}

}  // namespace omniquad::nn
