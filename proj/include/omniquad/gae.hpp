#pragma once

#include "omniquad/rollout.hpp"

namespace omniquad {

struct Advantages {
  Eigen::VectorXd adv;      // N, unnormalized
  Eigen::VectorXd returns;  // N, advantage + value
};

// Standard recursive generalized advantage estimation, per environment, in
// double. Timed-out episodes bootstrap with the stored terminal value;
// crashes do not. The batch tail bootstraps with end_value.
inline Advantages gae_advantages(const RolloutBatch& batch, double gamma, double lam) {
  Advantages out;
  const long n = batch.size();
  out.adv.resize(n);
  out.returns.resize(n);
  for (int w = 0; w < batch.n_envs; ++w) {
    double carry = 0.0;
    for (int t = batch.horizon - 1; t >= 0; --t) {
      const long g = static_cast<long>(w) * batch.horizon + t;
      const bool done = batch.done[static_cast<std::size_t>(g)] != 0;
      double next_value;
      if (done) {
        next_value = batch.bootstrap[g];  // zero unless TimeUp
        carry = 0.0;
      } else if (t == batch.horizon - 1) {
        next_value = batch.end_value[w];
        carry = 0.0;
      } else {
        next_value = batch.value[g + 1];
      }
      const double delta =
          static_cast<double>(batch.reward[g]) + gamma * next_value - batch.value[g];
      carry = delta + gamma * lam * carry;
      out.adv[g] = carry;
      out.returns[g] = carry + batch.value[g];
    }
  }
  return out;
}

// Batch-level advantage normalization (the spec normalizes per batch, not per
// minibatch).
inline Eigen::VectorXf normalize_advantages(const Eigen::VectorXd& adv) {
  const double mean = adv.mean();
  const double var = (adv.array() - mean).square().sum() / std::max<long>(adv.size() - 1, 1);
  const double std = std::sqrt(std::max(var, 1e-12));
  return ((adv.array() - mean) / (std + 1e-8)).cast<float>();
}

}  // namespace omniquad
