#pragma once

#include <iostream>

#include "omniquad/checkpoint.hpp"
#include "omniquad/env.hpp"
#include "omniquad/threading.hpp"

namespace omniquad {

inline std::uint64_t episode_stream_index(int env_index, long episode) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(env_index)) << 32) |
         static_cast<std::uint32_t>(episode);
}

// Transitions of one collection round, env-major: global index = env*horizon + t.
struct RolloutBatch {
  int n_envs = 0, horizon = 0, obs_dim = 0, e_dim = 0;

  Eigen::MatrixXf obs;       // obs_dim x N, normalized as the policy saw it
  Eigen::MatrixXd obs_raw;   // obs_dim x N, raw, feeds the normalizer update
  Eigen::MatrixXf priv;      // kPrivilegedDim x N, normalized critic side input
  Eigen::MatrixXd priv_raw;  // kPrivilegedDim x N
  Eigen::MatrixXf e_norm;    // e_dim x N (zero rows when the variant is blind)
  Eigen::MatrixXf pre_tanh;  // 4 x N
  Eigen::VectorXf log_prob;  // N
  Eigen::VectorXf reward;    // N
  Eigen::VectorXf value;     // N
  std::vector<std::uint8_t> done;       // N, episode ended at this step
  Eigen::VectorXf bootstrap;            // N, V(terminal) on TimeUp, else 0
  Eigen::VectorXf end_value;            // n_envs, V of the state after the last step
  std::vector<std::uint8_t> end_done;   // n_envs, last step already ended the episode

  struct EpisodeStat {
    double reward = 0.0;
    int length = 0;
    bool crashed = false;
    bool fault = false;
  };
  std::vector<std::vector<EpisodeStat>> episodes;  // per env, in order
  long faults = 0;

  void resize(int envs, int hor, int od, int ed) {
    n_envs = envs;
    horizon = hor;
    obs_dim = od;
    e_dim = ed;
    const int n = envs * hor;
    obs.setZero(od, n);
    obs_raw.setZero(od, n);
    priv.setZero(kPrivilegedDim, n);
    priv_raw.setZero(kPrivilegedDim, n);
    e_norm.setZero(std::max(ed, 1), n);
    pre_tanh.setZero(kActionDim, n);
    log_prob.setZero(n);
    reward.setZero(n);
    value.setZero(n);
    done.assign(static_cast<std::size_t>(n), 0);
    bootstrap.setZero(n);
    end_value.setZero(envs);
    end_done.assign(static_cast<std::size_t>(envs), 0);
    episodes.assign(static_cast<std::size_t>(envs), {});
    faults = 0;
  }

  long size() const { return static_cast<long>(n_envs) * horizon; }
};

// Per-environment persistent rollout slot.
struct EnvSlot {
  explicit EnvSlot(const Config& cfg, const EnvOptions& opts) : env(cfg, opts) {}
  QuadEnv env;
  long episode_index = 0;  // episodes started so far
  double ep_reward = 0.0;
  int ep_len = 0;
};

class RolloutWorkerSet {
 public:
  RolloutWorkerSet(const Config& cfg, const EnvOptions& opts, std::uint64_t seed, int n_envs)
      : seed_(seed), action_rngs_(static_cast<std::size_t>(n_envs)) {
    for (int i = 0; i < n_envs; ++i) slots_.emplace_back(cfg, opts);
    for (int i = 0; i < n_envs; ++i) start_episode(i);
  }

  void start_episode(int i) {
    EnvSlot& s = slots_[static_cast<std::size_t>(i)];
    s.env.reset(Rng::stream(seed_, rng_tag::kEnv, episode_stream_index(i, s.episode_index)));
    action_rngs_[static_cast<std::size_t>(i)] =
        Rng::stream(seed_, rng_tag::kAction, episode_stream_index(i, s.episode_index));
    ++s.episode_index;
    s.ep_reward = 0.0;
    s.ep_len = 0;
  }

  // Fast-forward episode counters (resume support).
  void set_episode_counters(const std::vector<long>& counts) {
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      slots_[i].episode_index = counts[i];
      start_episode(static_cast<int>(i));
    }
  }

  std::vector<long> episode_counters() const {
    std::vector<long> out;
    for (const auto& s : slots_) out.push_back(s.episode_index);
    return out;
  }

  EnvSlot& slot(int i) { return slots_[static_cast<std::size_t>(i)]; }
  Rng& action_rng(int i) { return action_rngs_[static_cast<std::size_t>(i)]; }
  int size() const { return static_cast<int>(slots_.size()); }

 private:
  std::uint64_t seed_;
  std::vector<EnvSlot> slots_;
  std::vector<Rng> action_rngs_;
};

// Latent fed to the policy during collection: mu(e) for the expert, e itself
// for the sysid variant, nothing for blind variants.
inline Eigen::VectorXf rollout_latent(const PolicyBundle& b, const Eigen::VectorXf& e_norm_f) {
  if (b.pi.latent_dim == 0) return Eigen::VectorXf();
  if (b.has_mu) return b.mu.net.forward_one(e_norm_f);
  return e_norm_f;
}

// Collects horizon steps in every environment with a read-only policy
// snapshot. Each environment is an independent task; results land in
// disjoint batch columns, so the batch is identical for any worker count.
inline void collect_rollouts(const PolicyBundle& bundle, const Config& cfg,
                             RolloutWorkerSet& workers, RolloutBatch& batch, ThreadPool& pool) {
  const VariantInfo info = variant_info(bundle.variant);
  const bool ltf = bundle.variant == PolicyVariant::Ltf;
  const bool uses_e = info.latent_dim > 0;
  const int horizon = cfg.ppo.horizon;
  batch.resize(workers.size(), horizon, info.obs_dim, uses_e ? QuadParams::kEnvDim : 0);
  const EnvNormalizer e_normalizer(bundle.e_norm_ranges);

  pool.run(workers.size(), [&](int w) {
    EnvSlot& slot = workers.slot(w);
    Rng& action_rng = workers.action_rng(w);
    auto& ep_stats = batch.episodes[static_cast<std::size_t>(w)];

    auto latent_for_env = [&](Eigen::VectorXf& e_out) -> Eigen::VectorXf {
      if (!uses_e) return Eigen::VectorXf();
      const auto e = e_normalizer.normalize(slot.env.params().flatten());
      e_out = Eigen::Map<const Eigen::Matrix<double, QuadParams::kEnvDim, 1>>(e.data()).cast<float>();
      return bundle.has_mu ? bundle.mu.net.forward_one(e_out) : e_out;
    };

    auto value_of = [&](const Eigen::VectorXf& x, const Eigen::VectorXf& z,
                        const Eigen::VectorXf& priv) -> float {
      Eigen::VectorXf in(info.obs_dim + info.latent_dim + kPrivilegedDim);
      in.head(info.obs_dim) = x;
      if (info.latent_dim > 0) in.segment(info.obs_dim, info.latent_dim) = z;
      in.tail(kPrivilegedDim) = priv;
      return bundle.value.forward_one(in)[0];
    };
    auto priv_of = [&](Eigen::VectorXd* raw = nullptr) -> Eigen::VectorXf {
      const Eigen::VectorXd p = slot.env.privileged_state();
      if (raw) *raw = p;
      return bundle.priv_norm.normalize(p).cast<float>();
    };

    for (int t = 0; t < horizon; ++t) {
      const long g = static_cast<long>(w) * horizon + t;
      const ObsPack pack = slot.env.observe(ltf);
      const Eigen::VectorXd x_norm_d = bundle.obs_norm.normalize(pack.x_aug);
      const Eigen::VectorXf x_norm = x_norm_d.cast<float>();
      Eigen::VectorXf e_f;
      const Eigen::VectorXf z = latent_for_env(e_f);
      Eigen::VectorXd priv_raw;
      const Eigen::VectorXf priv = priv_of(&priv_raw);

      const ActionSample a = bundle.pi.act(x_norm, z, ActMode::Stochastic, &action_rng);
      const float v = value_of(x_norm, z, priv);

      batch.obs.col(g) = x_norm;
      batch.obs_raw.col(g) = pack.x_aug;
      batch.priv.col(g) = priv;
      batch.priv_raw.col(g) = priv_raw;
      if (uses_e) batch.e_norm.col(g) = e_f;
      batch.pre_tanh.col(g) = a.pre_tanh.cast<float>();
      batch.log_prob[g] = static_cast<float>(a.log_prob);
      batch.value[g] = v;

      StepInfo step_info;
      bool fault = false;
      try {
        step_info = slot.env.step_action(a.raw);
      } catch (const SimFault& e) {
        // Episode aborted: counted, logged, environment reset below.
        fault = true;
        step_info.reward = RewardTerms{};
        step_info.termination = Termination::Crashed;
        step_info.done = true;
        const std::string msg =
            "[rollout] simulation fault in env " + std::to_string(w) + ": " + e.what() + "\n";
        std::cerr << msg;
      }

      batch.reward[g] = static_cast<float>(step_info.reward.total);
      batch.done[static_cast<std::size_t>(g)] = step_info.done ? 1 : 0;
      slot.ep_reward += step_info.reward.total;
      slot.ep_len += 1;

      if (step_info.done) {
        if (step_info.termination == Termination::TimeUp) {
          // Bootstrapped value of the terminal state.
          const ObsPack term = slot.env.observe(ltf);
          const Eigen::VectorXf xt = bundle.obs_norm.normalize(term.x_aug).cast<float>();
          Eigen::VectorXf e_t;
          const Eigen::VectorXf zt = latent_for_env(e_t);
          batch.bootstrap[g] = value_of(xt, zt, priv_of());
        }
        ep_stats.push_back({slot.ep_reward, slot.ep_len,
                            step_info.termination == Termination::Crashed, fault});
        workers.start_episode(w);
      }
    }

    // Value of the state after the batch's final step, for the GAE tail.
    const long last = static_cast<long>(w) * horizon + horizon - 1;
    batch.end_done[static_cast<std::size_t>(w)] = batch.done[static_cast<std::size_t>(last)];
    if (!batch.done[static_cast<std::size_t>(last)]) {
      const ObsPack tail = slot.env.observe(ltf);
      const Eigen::VectorXf xt = bundle.obs_norm.normalize(tail.x_aug).cast<float>();
      Eigen::VectorXf e_t;
      const Eigen::VectorXf zt = latent_for_env(e_t);
      batch.end_value[w] = value_of(xt, zt, priv_of());
    }
  });

  for (const auto& env_eps : batch.episodes)
    for (const auto& ep : env_eps)
      if (ep.fault) ++batch.faults;
}

}  // namespace omniquad
