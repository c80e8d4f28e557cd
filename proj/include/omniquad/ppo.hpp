#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>

#include "omniquad/gae.hpp"

namespace omniquad {

// ---------------------------------------------------------------------------
// Clipped-surrogate loss and exact gradients for one minibatch. Templated on
// the scalar: float in production, double in the reference-comparison tests.
// ---------------------------------------------------------------------------

template <class S>
struct PpoMinibatch {
  nn::MatX<S> obs;       // obs_dim x B
  nn::MatX<S> e_norm;    // e_dim x B (possibly 0 rows)
  nn::MatX<S> priv;      // critic-only side input x B (possibly 0 rows)
  nn::MatX<S> pre_tanh;  // 4 x B
  nn::VecX<S> old_logp;  // B
  nn::VecX<S> adv;       // B, already normalized
  nn::VecX<S> ret;       // B, value targets
};

struct PpoStats {
  double pg_loss = 0.0;
  double v_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_frac = 0.0;
  double total_loss = 0.0;
  long samples = 0;

  void accumulate(const PpoStats& o) {
    pg_loss += o.pg_loss;
    v_loss += o.v_loss;
    entropy += o.entropy;
    approx_kl += o.approx_kl;
    clip_frac += o.clip_frac;
    total_loss += o.total_loss;
    samples += o.samples;
  }
};

struct PpoGrads {
  template <class S>
  struct Of {
    nn::TensorList<S> pi, log_std, mu, value;
  };
};

// Computes sum-form losses and gradients over the minibatch; the caller
// divides by the full minibatch size, so chunked evaluation reduces exactly.
// `denom` is that full size.
template <class S>
PpoStats ppo_minibatch_grads(const GaussianPolicy<S>& pi, const Encoder<S>* mu,
                             const nn::Mlp<S>& value, const PpoMinibatch<S>& mb,
                             const PpoConfig& cfg, long denom,
                             typename PpoGrads::Of<S>& grads) {
  const long b = mb.obs.cols();
  const int latent_dim = pi.latent_dim;
  const int priv_dim = static_cast<int>(mb.priv.rows());
  const S inv_n = static_cast<S>(1.0 / static_cast<double>(denom));

  // Forward: latent, policy mean, value (the critic additionally sees the
  // privileged block).
  typename nn::Mlp<S>::Cache mu_cache, pi_cache, v_cache;
  nn::MatX<S> input(pi.obs_dim + latent_dim, b);
  input.topRows(pi.obs_dim) = mb.obs;
  if (latent_dim > 0) {
    if (mu != nullptr)
      input.bottomRows(latent_dim) = mu->net.forward(mb.e_norm, &mu_cache);
    else
      input.bottomRows(latent_dim) = mb.e_norm;
  }
  nn::MatX<S> v_input(pi.obs_dim + latent_dim + priv_dim, b);
  v_input.topRows(pi.obs_dim + latent_dim) = input;
  if (priv_dim > 0) v_input.bottomRows(priv_dim) = mb.priv;
  const nn::MatX<S> mean = pi.net.forward(input, &pi_cache);
  const nn::MatX<S> v_out = value.forward(v_input, &v_cache);

  const nn::VecX<S> log_std = pi.log_std.tensors[0].col(0);
  const nn::VecX<S> inv_std = (-log_std.array()).exp().matrix();
  constexpr double kLog2Pi = 1.8378770664093453;

  // Per-sample new log-prob of the stored pre-tanh sample.
  nn::MatX<S> norm_d = (mb.pre_tanh - mean).array().colwise() * inv_std.array();
  nn::VecX<S> logp_new =
      (-S(0.5) * norm_d.array().square().colwise().sum()).matrix().transpose();
  logp_new.array() += -log_std.sum() - S(0.5 * kLog2Pi) * S(kActionDim);

  PpoStats stats;
  stats.samples = b;
  nn::MatX<S> d_mean(kActionDim, b);
  nn::VecX<S> d_logstd_acc = nn::VecX<S>::Zero(kActionDim);
  nn::MatX<S> d_v(1, b);

  const S clip_lo = static_cast<S>(1.0 - cfg.clip), clip_hi = static_cast<S>(1.0 + cfg.clip);
  double pg_sum = 0.0, kl_sum = 0.0, clip_sum = 0.0, v_sum = 0.0;
  for (long i = 0; i < b; ++i) {
    const S logratio = logp_new[i] - mb.old_logp[i];
    const S ratio = std::exp(logratio);
    const S a = mb.adv[i];
    const S unclipped = ratio * a;
    const S clipped = std::clamp(ratio, clip_lo, clip_hi) * a;
    pg_sum += -static_cast<double>(std::min(unclipped, clipped));
    kl_sum += static_cast<double>(ratio - S(1) - logratio);
    if (ratio < clip_lo || ratio > clip_hi) clip_sum += 1.0;

    // Gradient flows only while the unclipped branch is active.
    const S d_logp = (unclipped <= clipped) ? -a * ratio * inv_n : S(0);
    d_mean.col(i) = d_logp * (norm_d.col(i).array() * inv_std.array()).matrix();
    d_logstd_acc += d_logp * (norm_d.col(i).array().square() - S(1)).matrix();

    const S verr = v_out(0, i) - mb.ret[i];
    v_sum += 0.5 * static_cast<double>(verr) * static_cast<double>(verr);
    d_v(0, i) = static_cast<S>(cfg.value_coef) * verr * inv_n;
  }

  // Entropy of the diagonal Gaussian is state independent; the bonus only
  // shapes log_std. Sum form: each chunk contributes b/denom of the term.
  const double entropy =
      static_cast<double>(log_std.sum()) + 0.5 * (1.0 + kLog2Pi) * kActionDim;
  d_logstd_acc.array() -= static_cast<S>(cfg.entropy_coef) * static_cast<S>(b) * inv_n;

  stats.pg_loss = pg_sum;
  stats.v_loss = v_sum;
  stats.entropy = entropy * b;
  stats.approx_kl = kl_sum;
  stats.clip_frac = clip_sum;
  stats.total_loss = pg_sum + cfg.value_coef * v_sum - cfg.entropy_coef * entropy * b;

  // Backward.
  grads.log_std.tensors[0].col(0) += d_logstd_acc;
  const nn::MatX<S> d_in_pi = pi.net.backward(pi_cache, d_mean, grads.pi);
  const nn::MatX<S> d_in_v = value.backward(v_cache, d_v, grads.value);
  if (latent_dim > 0 && mu != nullptr) {
    const nn::MatX<S> d_latent =
        d_in_pi.bottomRows(latent_dim) + d_in_v.middleRows(pi.obs_dim, latent_dim);
    mu->net.backward(mu_cache, d_latent, grads.mu);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Production update: minibatched epochs with fixed-chunk parallel gradient
// evaluation (chunk layout is constant, so results do not depend on the
// worker count), global grad-norm clipping and per-module Adam.
// ---------------------------------------------------------------------------

struct PpoOptimizers {
  nn::Adam<float> pi, log_std, mu, value;

  static PpoOptimizers make(const PolicyBundle& b) {
    PpoOptimizers o;
    o.pi = nn::Adam<float>(b.pi.net.params);
    o.log_std = nn::Adam<float>(b.pi.log_std);
    if (b.has_mu) o.mu = nn::Adam<float>(b.mu.net.params);
    o.value = nn::Adam<float>(b.value.params);
    return o;
  }
};

inline constexpr int kGradChunk = 256;

struct UpdateResult {
  PpoStats stats;      // averaged
  double grad_norm = 0.0;
  double lr = 0.0;     // learning rate after adaptation
  int skipped_minibatches = 0;
};

inline std::uint64_t batch_fingerprint(const RolloutBatch& batch) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const float* p, long n) {
    for (long i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, &p[i], 4);
      h ^= bits;
      h *= 0x100000001b3ULL;
    }
  };
  mix(batch.obs.data(), std::min<long>(batch.obs.size(), 4096));
  mix(batch.reward.data(), batch.reward.size());
  return h;
}

// `lr` carries the adapted learning rate across updates; when adaptive_lr is
// off it stays at its initial value.
inline UpdateResult ppo_update(PolicyBundle& bundle, const RolloutBatch& batch,
                               const Advantages& gae, const PpoConfig& cfg, PpoOptimizers& opt,
                               Rng& learner_rng, ThreadPool& pool, double& lr) {
  const long n = batch.size();
  const Eigen::VectorXf adv_norm = normalize_advantages(gae.adv);
  const Eigen::VectorXf returns = gae.returns.cast<float>();
  const bool uses_e = batch.e_dim > 0;

  std::vector<long> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0L);

  UpdateResult result;
  PpoStats total;
  double grad_norm_sum = 0.0;
  int minibatches_done = 0;

  const int mb_size = cfg.minibatch;
  const int n_chunks_per_mb = (mb_size + kGradChunk - 1) / kGradChunk;
  std::vector<PpoGrads::Of<float>> chunk_grads(static_cast<std::size_t>(n_chunks_per_mb));
  std::vector<PpoStats> chunk_stats(static_cast<std::size_t>(n_chunks_per_mb));
  for (auto& g : chunk_grads) {
    g.pi = bundle.pi.net.params.zeros_like();
    g.log_std = bundle.pi.log_std.zeros_like();
    if (bundle.has_mu) g.mu = bundle.mu.net.params.zeros_like();
    g.value = bundle.value.params.zeros_like();
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with the learner stream.
    for (long i = n - 1; i > 0; --i) {
      const long j = static_cast<long>(learner_rng.uniform_index(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }

    for (long start = 0; start + mb_size <= n; start += mb_size) {
      pool.run(n_chunks_per_mb, [&](int c) {
        const long c_begin = start + static_cast<long>(c) * kGradChunk;
        const long c_size = std::min<long>(kGradChunk, start + mb_size - c_begin);
        PpoMinibatch<float> mb;
        mb.obs.resize(batch.obs.rows(), c_size);
        mb.e_norm.resize(uses_e ? batch.e_norm.rows() : 0, c_size);
        mb.priv.resize(kPrivilegedDim, c_size);
        mb.pre_tanh.resize(kActionDim, c_size);
        mb.old_logp.resize(c_size);
        mb.adv.resize(c_size);
        mb.ret.resize(c_size);
        for (long k = 0; k < c_size; ++k) {
          const long src = order[static_cast<std::size_t>(c_begin + k)];
          mb.obs.col(k) = batch.obs.col(src);
          if (uses_e) mb.e_norm.col(k) = batch.e_norm.col(src);
          mb.priv.col(k) = batch.priv.col(src);
          mb.pre_tanh.col(k) = batch.pre_tanh.col(src);
          mb.old_logp[k] = batch.log_prob[src];
          mb.adv[k] = adv_norm[src];
          mb.ret[k] = returns[src];
        }
        auto& g = chunk_grads[static_cast<std::size_t>(c)];
        g.pi.set_zero();
        g.log_std.set_zero();
        if (bundle.has_mu) g.mu.set_zero();
        g.value.set_zero();
        chunk_stats[static_cast<std::size_t>(c)] = ppo_minibatch_grads<float>(
            bundle.pi, bundle.has_mu ? &bundle.mu : nullptr, bundle.value, mb, cfg, mb_size, g);
      });

      // Fixed-order reduction.
      PpoStats mb_stats;
      auto& g0 = chunk_grads[0];
      for (int c = 1; c < n_chunks_per_mb; ++c) {
        g0.pi.add_scaled(chunk_grads[static_cast<std::size_t>(c)].pi, 1.0f);
        g0.log_std.add_scaled(chunk_grads[static_cast<std::size_t>(c)].log_std, 1.0f);
        if (bundle.has_mu) g0.mu.add_scaled(chunk_grads[static_cast<std::size_t>(c)].mu, 1.0f);
        g0.value.add_scaled(chunk_grads[static_cast<std::size_t>(c)].value, 1.0f);
      }
      for (int c = 0; c < n_chunks_per_mb; ++c) mb_stats.accumulate(chunk_stats[static_cast<std::size_t>(c)]);

      const double denom = static_cast<double>(mb_stats.samples);
      const double loss = (mb_stats.pg_loss + cfg.value_coef * mb_stats.v_loss -
                           cfg.entropy_coef * mb_stats.entropy) / denom;
      if (!std::isfinite(loss)) {
        // Update skipped; the incident is visible in the metrics stream.
        std::cerr << "[ppo] non-finite loss, skipping update (batch fingerprint "
                  << std::hex << batch_fingerprint(batch) << std::dec << ")\n";
        ++result.skipped_minibatches;
        continue;
      }

      std::vector<nn::TensorList<float>*> all = {&g0.pi, &g0.log_std, &g0.value};
      if (bundle.has_mu) all.push_back(&g0.mu);
      grad_norm_sum += nn::clip_grad_norm(all, cfg.max_grad_norm);

      opt.pi.step(bundle.pi.net.params, g0.pi, lr);
      opt.log_std.step(bundle.pi.log_std, g0.log_std, lr);
      if (bundle.has_mu) opt.mu.step(bundle.mu.net.params, g0.mu, lr);
      opt.value.step(bundle.value.params, g0.value, lr);
      bundle.pi.clamp_log_std();

      total.accumulate(mb_stats);
      ++minibatches_done;
    }
  }
  result.lr = lr;

  // Average the sum-form stats.
  if (total.samples > 0) {
    const double s = static_cast<double>(total.samples);
    result.stats.pg_loss = total.pg_loss / s;
    result.stats.v_loss = total.v_loss / s;
    result.stats.entropy = total.entropy / s;
    result.stats.approx_kl = total.approx_kl / s;
    result.stats.clip_frac = total.clip_frac / s;
    result.stats.total_loss = total.total_loss / s;
    result.stats.samples = total.samples;
  }
  result.grad_norm = minibatches_done > 0 ? grad_norm_sum / minibatches_done : 0.0;

  // One bounded learning-rate adjustment per update, from the mean KL.
  if (cfg.adaptive_lr && total.samples > 0) {
    if (result.stats.approx_kl > 2.0 * cfg.target_kl)
      lr = std::max(lr / 1.5, cfg.lr_min);
    else if (result.stats.approx_kl < 0.5 * cfg.target_kl)
      lr = std::min(lr * 1.5, cfg.lr_max);
    result.lr = lr;
  }
  return result;
}

}  // namespace omniquad
