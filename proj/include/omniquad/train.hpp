#pragma once

#include "omniquad/ppo.hpp"

namespace omniquad {

namespace fs = std::filesystem;

// Deterministic quick evaluation used for the in-training success metric:
// paired episode seeds, deterministic actions, success when the final height
// lands within the band of the goal.
struct QuickEvalResult {
  double success_rate = 0.0;
  double mean_reward = 0.0;
};

inline QuickEvalResult quick_eval(const PolicyBundle& bundle, const Config& cfg,
                                  const EnvOptions& opts, std::uint64_t seed, int episodes,
                                  ThreadPool& pool) {
  const VariantInfo info = variant_info(bundle.variant);
  const bool ltf = bundle.variant == PolicyVariant::Ltf;
  const EnvNormalizer e_normalizer(bundle.e_norm_ranges);
  std::vector<std::uint8_t> success(static_cast<std::size_t>(episodes), 0);
  std::vector<double> rewards(static_cast<std::size_t>(episodes), 0.0);

  pool.run(episodes, [&](int ep) {
    QuadEnv env(cfg, opts);
    env.reset(Rng::stream(seed, rng_tag::kEvalEpisode, static_cast<std::uint64_t>(ep)));
    double total_reward = 0.0;
    bool crashed = false;
    while (true) {
      const ObsPack pack = env.observe(ltf);
      const Eigen::VectorXf x = bundle.obs_norm.normalize(pack.x_aug).cast<float>();
      Eigen::VectorXf z;
      if (info.latent_dim > 0) {
        const auto e = e_normalizer.normalize(env.params().flatten());
        const Eigen::VectorXf ef =
            Eigen::Map<const Eigen::Matrix<double, QuadParams::kEnvDim, 1>>(e.data()).cast<float>();
        z = bundle.has_mu ? bundle.mu.net.forward_one(ef) : ef;
      }
      const ActionSample a = bundle.pi.act(x, z, ActMode::Deterministic, nullptr);
      StepInfo s;
      try {
        s = env.step_action(a.raw);
      } catch (const SimFault&) {
        crashed = true;
        break;
      }
      total_reward += s.reward.total;
      if (s.done) {
        crashed = s.termination == Termination::Crashed;
        break;
      }
    }
    const double err = std::abs(env.state().position.z() - cfg.eval.goal_height);
    success[static_cast<std::size_t>(ep)] = (!crashed && err <= cfg.eval.success_band) ? 1 : 0;
    rewards[static_cast<std::size_t>(ep)] = total_reward;
  });

  QuickEvalResult r;
  for (int i = 0; i < episodes; ++i) {
    r.success_rate += success[static_cast<std::size_t>(i)];
    r.mean_reward += rewards[static_cast<std::size_t>(i)];
  }
  r.success_rate /= episodes;
  r.mean_reward /= episodes;
  return r;
}

// Initial pre-tanh output bias: the hover command of the geometric-mid
// platform of the train table. Starting near a plausible collective greatly
// shortens the operating-point search.
inline double default_action_bias(const Ranges& ranges) {
  const RangeTable& t = ranges.train;
  const double cf_gm = std::sqrt(t.motor_constant.lo * t.motor_constant.hi);
  const double mass = t.mass.mid() * (1.0 + 0.01 * t.payload_pct.mid());
  const double w = std::sqrt(mass * kGravity / (4.0 * cf_gm));
  const double raw = std::clamp(2.0 * w / kOmegaScale - 1.0, -0.95, 0.95);
  return std::atanh(raw);
}

// Run manifest: everything needed to reproduce the artifact from scratch.
inline void write_run_manifest(const fs::path& dir, const std::string& command,
                               const Config& cfg, std::uint64_t seed) {
  nlohmann::json m;
  m["command"] = command;
  m["seed"] = seed;
  m["config_hash"] = cfg.hash();
  m["code_version"] = "omniquad 0.1.0";
  m["resolved_config"] = cfg.canonical_text();
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << m.dump(2) << "\n";
}

struct TrainPhase1Result {
  fs::path final_checkpoint;
  double last_success = 0.0;
};

// Saves weights, optimizer moments and counters so an interrupted run can
// continue from the latest state (episodes restart, streams fast-forward).
inline void save_train_state(const fs::path& path, const PolicyBundle& bundle,
                             const PpoOptimizers& opt, long global_step, long update_index,
                             const std::vector<long>& episode_counters) {
  Checkpoint c = bundle.to_checkpoint("train_state");
  c.extra["global_step"] = global_step;
  c.extra["update_index"] = update_index;
  c.extra["episode_counters"] = episode_counters;
  c.extra["adam_steps"] = {{"pi", const_cast<PpoOptimizers&>(opt).pi.step_count()},
                           {"log_std", const_cast<PpoOptimizers&>(opt).log_std.step_count()},
                           {"mu", const_cast<PpoOptimizers&>(opt).mu.step_count()},
                           {"value", const_cast<PpoOptimizers&>(opt).value.step_count()}};
  auto pack_moments = [&c](const std::string& prefix, nn::Adam<float>& a) {
    detail::pack_tensors(c, prefix + ".m1", a.moments1());
    detail::pack_tensors(c, prefix + ".m2", a.moments2());
  };
  auto& o = const_cast<PpoOptimizers&>(opt);
  pack_moments("adam.pi", o.pi);
  pack_moments("adam.log_std", o.log_std);
  if (bundle.has_mu) pack_moments("adam.mu", o.mu);
  pack_moments("adam.value", o.value);
  c.save(path.string());
}

inline long load_train_state(const fs::path& path, PolicyBundle& bundle, PpoOptimizers& opt,
                             long& update_index, std::vector<long>& episode_counters) {
  const Checkpoint c = Checkpoint::load(path.string());
  if (c.phase != "train_state") throw CheckpointError("not a train-state file: " + path.string());
  bundle = PolicyBundle::from_checkpoint(c);
  // from_checkpoint freezes stats for deployment; training continues updating.
  ObsNormalizer norm(c.obs_dim);
  norm.set_stats(c.obs_mean, c.obs_std, c.obs_count);
  bundle.obs_norm = norm;
  {
    const auto& pn = c.extra.at("priv_norm");
    const auto mean = pn.at("mean").get<std::vector<double>>();
    const auto std_v = pn.at("std").get<std::vector<double>>();
    ObsNormalizer pnorm(static_cast<int>(mean.size()));
    pnorm.set_stats(
        Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<long>(mean.size())),
        Eigen::Map<const Eigen::VectorXd>(std_v.data(), static_cast<long>(std_v.size())),
        pn.at("count").get<long>());
    bundle.priv_norm = pnorm;
  }
  opt = PpoOptimizers::make(bundle);
  auto unpack_moments = [&c](const std::string& prefix, nn::Adam<float>& a) {
    detail::unpack_tensors(c, prefix + ".m1", a.moments1());
    detail::unpack_tensors(c, prefix + ".m2", a.moments2());
  };
  unpack_moments("adam.pi", opt.pi);
  unpack_moments("adam.log_std", opt.log_std);
  if (bundle.has_mu) unpack_moments("adam.mu", opt.mu);
  unpack_moments("adam.value", opt.value);
  opt.pi.set_step_count(c.extra.at("adam_steps").at("pi").get<long>());
  opt.log_std.set_step_count(c.extra.at("adam_steps").at("log_std").get<long>());
  opt.mu.set_step_count(c.extra.at("adam_steps").at("mu").get<long>());
  opt.value.set_step_count(c.extra.at("adam_steps").at("value").get<long>());
  update_index = c.extra.at("update_index").get<long>();
  episode_counters = c.extra.at("episode_counters").get<std::vector<long>>();
  return c.extra.at("global_step").get<long>();
}

// Phase I: PPO on the privileged policy (or a learned baseline variant that
// differs only in its inputs). Writes one metrics row per update, periodic
// checkpoints at the eval cadence, and the final checkpoint.
inline TrainPhase1Result train_phase1(const Config& cfg, std::uint64_t seed, PolicyVariant variant,
                                      const fs::path& out_dir, bool resume = false,
                                      bool quiet = false) {
  fs::create_directories(out_dir);
  write_run_manifest(out_dir, std::string("train-phase1:") + variant_name(variant), cfg, seed);

  const int workers = resolve_workers(cfg.ppo.workers);
  ThreadPool pool(workers);

  EnvOptions opts;
  opts.regime = Config::regime_of(cfg.ppo.regime);
  opts.randomize = cfg.ppo.randomize;
  opts.midepisode_shift = cfg.ppo.midepisode_shift;

  Rng init_rng = Rng::stream(seed, rng_tag::kPolicyInit, static_cast<std::uint64_t>(variant));
  PolicyBundle bundle = PolicyBundle::init(variant, init_rng, cfg.ppo.log_std_init,
                                           default_action_bias(cfg.ranges));
  bundle.config_hash = cfg.hash();
  bundle.e_norm_ranges = cfg.ranges.test;
  PpoOptimizers opt = PpoOptimizers::make(bundle);

  long global_step = 0;
  long update_index = 0;
  std::vector<long> episode_counters;
  const fs::path state_path = out_dir / "train_state.bin";
  if (resume && fs::exists(state_path)) {
    global_step = load_train_state(state_path, bundle, opt, update_index, episode_counters);
    if (!quiet)
      std::cout << "[train] resuming from " << state_path << " at step " << global_step << "\n";
  }

  RolloutWorkerSet envs(cfg, opts, seed, cfg.ppo.n_envs);
  if (!episode_counters.empty()) envs.set_episode_counters(episode_counters);

  const fs::path metrics_path = out_dir / "metrics.csv";
  std::ofstream metrics(metrics_path, resume && global_step > 0 ? std::ios::app : std::ios::trunc);
  if (!resume || global_step == 0) {
    metrics << "# config_hash=" << cfg.hash() << "\n";
    metrics << "update,steps,mean_ep_reward,ep_count,crash_rate,pg_loss,v_loss,entropy,approx_kl,"
               "clip_frac,grad_norm,log_std_mean,faults,eval_success,eval_mean_reward,lr\n";
  }

  RolloutBatch batch;
  long next_eval = ((global_step / cfg.ppo.eval_every) + 1) * cfg.ppo.eval_every;
  int checkpoint_idx = static_cast<int>(global_step / cfg.ppo.eval_every);
  double last_success = -1.0;
  double lr = bundle.extra.contains("lr") ? bundle.extra["lr"].get<double>() : cfg.ppo.lr;
  const auto t_start = std::chrono::steady_clock::now();

  while (global_step < cfg.ppo.total_steps) {
    collect_rollouts(bundle, cfg, envs, batch, pool);
    global_step += batch.size();

    const Advantages gae = gae_advantages(batch, cfg.ppo.gamma, cfg.ppo.lam);
    Rng learner_rng = Rng::stream(seed, rng_tag::kLearner, static_cast<std::uint64_t>(update_index));
    const UpdateResult up = ppo_update(bundle, batch, gae, cfg.ppo, opt, learner_rng, pool, lr);
    bundle.extra["lr"] = lr;

    // Normalizers learn from this batch after the update that consumed it.
    for (long i = 0; i < batch.size(); ++i) {
      bundle.obs_norm.update(batch.obs_raw.col(i));
      bundle.priv_norm.update(batch.priv_raw.col(i));
    }

    double ep_reward_sum = 0.0;
    long ep_count = 0, crash_count = 0;
    for (const auto& env_eps : batch.episodes)
      for (const auto& ep : env_eps) {
        ep_reward_sum += ep.reward;
        ++ep_count;
        if (ep.crashed) ++crash_count;
      }
    const double mean_ep_reward = ep_count > 0 ? ep_reward_sum / ep_count : 0.0;

    double eval_success = -1.0, eval_reward = 0.0;
    if (global_step >= next_eval || global_step >= cfg.ppo.total_steps) {
      const QuickEvalResult ev =
          quick_eval(bundle, cfg, opts, seed, cfg.ppo.eval_episodes, pool);
      eval_success = ev.success_rate;
      eval_reward = ev.mean_reward;
      last_success = ev.success_rate;
      next_eval += cfg.ppo.eval_every;

      Checkpoint ck = bundle.to_checkpoint("phase1");
      ck.extra["global_step"] = global_step;
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%03d.bin", checkpoint_idx++);
      ck.save((out_dir / name).string());
      save_train_state(state_path, bundle, opt, global_step, update_index + 1,
                       envs.episode_counters());
      if (!quiet) {
        const double elapsed = std::chrono::duration<double>(
            std::chrono::steady_clock::now() - t_start).count();
        std::cout << "[train] step " << global_step << " reward " << mean_ep_reward
                  << " success " << ev.success_rate << " kl " << up.stats.approx_kl
                  << " sps " << static_cast<long>(global_step / std::max(elapsed, 1e-9)) << "\n";
      }
    }

    char row[512];
    std::snprintf(row, sizeof(row),
                  "%ld,%ld,%.9g,%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%ld,%.9g,%.9g,%.9g\n",
                  update_index, global_step, mean_ep_reward, ep_count,
                  ep_count > 0 ? static_cast<double>(crash_count) / ep_count : 0.0,
                  up.stats.pg_loss, up.stats.v_loss, up.stats.entropy, up.stats.approx_kl,
                  up.stats.clip_frac, up.grad_norm,
                  bundle.pi.log_std.tensors[0].col(0).mean(), batch.faults, eval_success,
                  eval_reward, up.lr);
    metrics << row;
    metrics.flush();
    ++update_index;
  }

  bundle.obs_norm.freeze();
  bundle.priv_norm.freeze();
  bundle.extra["global_step"] = global_step;
  Checkpoint final_ck = bundle.to_checkpoint("phase1");
  const fs::path final_path = out_dir / "checkpoint_final.bin";
  final_ck.save(final_path.string());

  TrainPhase1Result r;
  r.final_checkpoint = final_path;
  r.last_success = last_success;
  return r;
}

}  // namespace omniquad
