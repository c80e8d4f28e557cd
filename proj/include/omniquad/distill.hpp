#pragma once

#include "omniquad/train.hpp"

namespace omniquad {

// Rolling dataset for the supervised adaptation phase. Each record is one
// control step: normalized observation, raw action, and the teacher latent at
// that step. A training example for record r is the window of up-to-400
// records preceding r within the same episode (zero-padded), with r's latent
// as the regression target. Records are kept in per-environment rings so an
// episode's steps stay contiguous under parallel collection; eviction is FIFO
// and sampling is uniform over everything currently stored.
class DistillBuffer {
 public:
  DistillBuffer(long capacity, int n_envs, int latent_dim)
      : per_env_cap_(std::max<long>(capacity / n_envs, kHistoryLen + 1)), latent_dim_(latent_dim) {
    rings_.resize(static_cast<std::size_t>(n_envs));
    for (auto& r : rings_) {
      r.obs.setZero(kObservationDim, per_env_cap_);
      r.action.setZero(kActionDim, per_env_cap_);
      r.target.setZero(latent_dim, per_env_cap_);
      r.episode.assign(static_cast<std::size_t>(per_env_cap_), -1);
    }
  }

  // Single writer per environment index; safe to call concurrently for
  // distinct env values.
  void push(int env, const Eigen::VectorXf& obs, const Vec4& action,
            const Eigen::VectorXf& target, long episode_id) {
    Ring& r = rings_[static_cast<std::size_t>(env)];
    const long at = r.head;
    r.obs.col(at) = obs;
    r.action.col(at) = action.cast<float>();
    r.target.col(at) = target;
    r.episode[static_cast<std::size_t>(at)] = episode_id;
    r.head = (r.head + 1) % per_env_cap_;
    r.count = std::min(r.count + 1, per_env_cap_);
  }

  long size() const {
    long n = 0;
    for (const auto& r : rings_) n += r.count;
    return n;
  }

  int latent_dim() const { return latent_dim_; }

  struct Example {
    Eigen::MatrixXf window;  // kPairDim x kHistoryLen
    Eigen::VectorXf target;
  };

  // Uniform draw over all stored records.
  Example sample(Rng& rng) const {
    long r = static_cast<long>(rng.uniform_index(static_cast<std::uint64_t>(size())));
    std::size_t env = 0;
    while (r >= rings_[env].count) {
      r -= rings_[env].count;
      ++env;
    }
    return materialize(static_cast<int>(env), r);
  }

  // record = age-ordered index into one ring (0 = oldest stored).
  Example materialize(int env, long record) const {
    const Ring& ring = rings_[static_cast<std::size_t>(env)];
    // Physical slot of the age-ordered index.
    const long oldest = (ring.head - ring.count + per_env_cap_) % per_env_cap_;
    const long slot = (oldest + record) % per_env_cap_;
    const long episode = ring.episode[static_cast<std::size_t>(slot)];

    Example ex;
    ex.window.setZero(HistoryBuffer::kPairDim, kHistoryLen);
    ex.target = ring.target.col(slot);
    // Walk backwards through the same episode; stop at boundaries or data
    // that has been overwritten.
    for (int k = 1; k <= kHistoryLen; ++k) {
      const long age = record - k;
      if (age < 0) break;
      const long s = (oldest + age) % per_env_cap_;
      if (ring.episode[static_cast<std::size_t>(s)] != episode) break;
      const int col = kHistoryLen - k;
      ex.window.col(col).head<kObservationDim>() = ring.obs.col(s);
      ex.window.col(col).tail<kActionDim>() = ring.action.col(s);
    }
    return ex;
  }

 private:
  struct Ring {
    Eigen::MatrixXf obs, action, target;
    std::vector<long> episode;
    long head = 0;
    long count = 0;
  };
  long per_env_cap_;
  int latent_dim_;
  std::vector<Ring> rings_;
};

struct PhiOptimizers {
  nn::Adam<float> embed, conv, head;
  static PhiOptimizers make(const AdaptationModule<float>& phi) {
    return {nn::Adam<float>(phi.embed.params), nn::Adam<float>(phi.conv.params),
            nn::Adam<float>(phi.head.params)};
  }
};

struct PhiGrads {
  nn::TensorList<float> embed, conv, head;
  static PhiGrads zeros(const AdaptationModule<float>& phi) {
    return {phi.embed.params.zeros_like(), phi.conv.params.zeros_like(),
            phi.head.params.zeros_like()};
  }
  void set_zero() {
    embed.set_zero();
    conv.set_zero();
    head.set_zero();
  }
  void add(const PhiGrads& o) {
    embed.add_scaled(o.embed, 1.0f);
    conv.add_scaled(o.conv, 1.0f);
    head.add_scaled(o.head, 1.0f);
  }
};

// One Adam update of phi on a uniform minibatch; returns the batch MSE.
inline double phi_train_step(AdaptationModule<float>& phi, PhiOptimizers& opt,
                             const DistillBuffer& buffer, int batch, double lr, Rng& rng,
                             ThreadPool& pool, std::vector<PhiGrads>& chunk_grads) {
  // Draw the whole minibatch on the caller thread so the sample set does not
  // depend on the worker count.
  std::vector<DistillBuffer::Example> examples(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) examples[static_cast<std::size_t>(i)] = buffer.sample(rng);

  constexpr int kChunk = 8;
  const int n_chunks = (batch + kChunk - 1) / kChunk;
  while (static_cast<int>(chunk_grads.size()) < n_chunks)
    chunk_grads.push_back(PhiGrads::zeros(phi));
  std::vector<double> chunk_loss(static_cast<std::size_t>(n_chunks), 0.0);

  pool.run(n_chunks, [&](int c) {
    auto& g = chunk_grads[static_cast<std::size_t>(c)];
    g.set_zero();
    double loss = 0.0;
    AdaptationModule<float>::Cache cache;
    const int begin = c * kChunk, end = std::min(batch, begin + kChunk);
    for (int i = begin; i < end; ++i) {
      const auto& ex = examples[static_cast<std::size_t>(i)];
      const Eigen::VectorXf zhat = phi.forward(ex.window, &cache);
      const Eigen::VectorXf err = zhat - ex.target;
      loss += err.squaredNorm();
      const Eigen::VectorXf d = 2.0f * err / static_cast<float>(batch);
      phi.backward(cache, d, g.embed, g.conv, g.head);
    }
    chunk_loss[static_cast<std::size_t>(c)] = loss;
  });

  PhiGrads& g0 = chunk_grads[0];
  double loss = chunk_loss[0];
  for (int c = 1; c < n_chunks; ++c) {
    g0.add(chunk_grads[static_cast<std::size_t>(c)]);
    loss += chunk_loss[static_cast<std::size_t>(c)];
  }
  opt.embed.step(phi.embed.params, g0.embed, lr);
  opt.conv.step(phi.conv.params, g0.conv, lr);
  opt.head.step(phi.head.params, g0.head, lr);
  return loss / batch;
}

// Teacher latent for a given environment: mu(e) for the privileged expert,
// the normalized e itself for the sysid variant. phi never sees e, only the
// observation/action history.
inline Eigen::VectorXf teacher_latent(const PolicyBundle& teacher, const EnvNormalizer& en,
                                      const QuadParams& params) {
  const auto e = en.normalize(params.flatten());
  const Eigen::VectorXf ef =
      Eigen::Map<const Eigen::Matrix<double, QuadParams::kEnvDim, 1>>(e.data()).cast<float>();
  return teacher.has_mu ? teacher.mu.net.forward_one(ef) : ef;
}

struct ExplainedVariance {
  double total = 0.0;
  Eigen::VectorXd per_dim;
};

inline ExplainedVariance explained_variance(const std::vector<Eigen::VectorXf>& target,
                                            const std::vector<Eigen::VectorXf>& pred) {
  const int dim = static_cast<int>(target.front().size());
  const long n = static_cast<long>(target.size());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  for (const auto& z : target) mean += z.cast<double>();
  mean /= static_cast<double>(n);
  Eigen::VectorXd sse = Eigen::VectorXd::Zero(dim), sst = Eigen::VectorXd::Zero(dim);
  for (long i = 0; i < n; ++i) {
    const Eigen::VectorXd z = target[static_cast<std::size_t>(i)].cast<double>();
    const Eigen::VectorXd zh = pred[static_cast<std::size_t>(i)].cast<double>();
    sse += (z - zh).array().square().matrix();
    sst += (z - mean).array().square().matrix();
  }
  ExplainedVariance ev;
  ev.per_dim = 1.0 - (sse.array() / sst.array().max(1e-12)).matrix().array();
  ev.total = 1.0 - sse.sum() / std::max(sst.sum(), 1e-12);
  return ev;
}

// Rolls the student (pi with phi's latent) for the given episodes and
// collects (teacher z, student zhat) pairs; also reports the success rate.
struct HoldoutResult {
  ExplainedVariance ev;
  double success_rate = 0.0;
};

inline HoldoutResult run_student_holdout(const PolicyBundle& student, const Config& cfg,
                                         const EnvOptions& opts, std::uint64_t seed, int episodes,
                                         ThreadPool& pool) {
  const EnvNormalizer en(student.e_norm_ranges);
  std::vector<std::vector<Eigen::VectorXf>> targets(static_cast<std::size_t>(episodes));
  std::vector<std::vector<Eigen::VectorXf>> preds(static_cast<std::size_t>(episodes));
  std::vector<std::uint8_t> success(static_cast<std::size_t>(episodes), 0);

  pool.run(episodes, [&](int ep) {
    QuadEnv env(cfg, opts);
    env.reset(Rng::stream(seed, rng_tag::kDistill, (1ULL << 32) + static_cast<std::uint64_t>(ep)));
    HistoryBuffer hist;
    bool crashed = false;
    while (true) {
      const ObsPack pack = env.observe(false);
      const Eigen::VectorXd x_norm_d = student.obs_norm.normalize(pack.x);
      const Eigen::VectorXf x = x_norm_d.cast<float>();
      const Eigen::VectorXf zhat = student.phi.forward(hist.window());
      targets[static_cast<std::size_t>(ep)].push_back(teacher_latent(student, en, env.params()));
      preds[static_cast<std::size_t>(ep)].push_back(zhat);
      const ActionSample a = student.pi.act(x, zhat, ActMode::Deterministic, nullptr);
      hist.push(x_norm_d, a.raw);
      StepInfo s;
      try {
        s = env.step_action(a.raw);
      } catch (const SimFault&) {
        crashed = true;
        break;
      }
      if (s.done) {
        crashed = s.termination == Termination::Crashed;
        break;
      }
    }
    const double err = std::abs(env.state().position.z() - cfg.eval.goal_height);
    success[static_cast<std::size_t>(ep)] = (!crashed && err <= cfg.eval.success_band) ? 1 : 0;
  });

  std::vector<Eigen::VectorXf> all_t, all_p;
  for (int ep = 0; ep < episodes; ++ep) {
    const auto& t = targets[static_cast<std::size_t>(ep)];
    const auto& p = preds[static_cast<std::size_t>(ep)];
    all_t.insert(all_t.end(), t.begin(), t.end());
    all_p.insert(all_p.end(), p.begin(), p.end());
  }
  HoldoutResult r;
  r.ev = explained_variance(all_t, all_p);
  for (int ep = 0; ep < episodes; ++ep) r.success_rate += success[static_cast<std::size_t>(ep)];
  r.success_rate /= episodes;
  return r;
}

struct TrainPhase2Result {
  fs::path final_checkpoint;
  double first_loss = 0.0;
  double last_loss = 0.0;
  double holdout_ev = 0.0;
};

// Phase II: on-policy distillation of the adaptation module. The student
// rolls out with its own actions (pi conditioned on phi's estimate), the
// teacher latent is recorded per step, and phi minimizes the MSE to it with
// Adam over the rolling buffer.
inline TrainPhase2Result train_phase2(const Config& cfg, std::uint64_t seed,
                                      const fs::path& teacher_path, const fs::path& out_dir,
                                      bool quiet = false) {
  fs::create_directories(out_dir);
  write_run_manifest(out_dir, "train-phase2", cfg, seed);

  const Checkpoint teacher_ck = Checkpoint::load(teacher_path.string());
  if (teacher_ck.phase != "phase1")
    throw ConfigError("train-phase2 needs a phase1 teacher checkpoint, got '" + teacher_ck.phase +
                      "'");
  PolicyBundle student = PolicyBundle::from_checkpoint(teacher_ck);
  if (student.pi.latent_dim == 0)
    throw ConfigError("teacher variant '" + teacher_ck.variant + "' has no latent to distill");
  Rng init_rng = Rng::stream(seed, rng_tag::kPolicyInit, 100);
  student.attach_phi(init_rng);

  const int workers = resolve_workers(cfg.distill.workers);
  ThreadPool pool(workers);
  const EnvNormalizer en(student.e_norm_ranges);

  EnvOptions opts;
  opts.regime = Config::regime_of(cfg.distill.regime);
  opts.randomize = true;
  opts.midepisode_shift = true;

  const int n_envs = cfg.distill.n_envs;
  DistillBuffer buffer(cfg.distill.buffer_capacity, n_envs, student.pi.latent_dim);
  PhiOptimizers opt = PhiOptimizers::make(student.phi);
  std::vector<PhiGrads> chunk_grads;

  struct StudentSlot {
    std::unique_ptr<QuadEnv> env;
    HistoryBuffer hist;
    long episode_index = 0;
    long episode_id = 0;
  };
  std::vector<StudentSlot> slots(static_cast<std::size_t>(n_envs));
  for (int i = 0; i < n_envs; ++i) {
    slots[static_cast<std::size_t>(i)].env = std::make_unique<QuadEnv>(cfg, opts);
    slots[static_cast<std::size_t>(i)].env->reset(
        Rng::stream(seed, rng_tag::kEnv, episode_stream_index(i, 0)));
    slots[static_cast<std::size_t>(i)].episode_index = 1;
  }

  const fs::path metrics_path = out_dir / "metrics.csv";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  metrics << "# config_hash=" << cfg.hash() << "\n";
  metrics << "chunk,steps,train_mse,holdout_ev,holdout_success\n";

  Rng sample_rng = Rng::stream(seed, rng_tag::kDistill, 0);
  long global_step = 0;
  long chunk_index = 0;
  double first_loss = -1.0, last_loss = 0.0;
  const long steps_per_env = std::max(1, cfg.distill.chunk_steps / n_envs);
  const auto t_start = std::chrono::steady_clock::now();

  while (global_step < cfg.distill.total_steps) {
    // Collection: student actions from pi(x, phi(history)); every step lands
    // in the environment's own ring.
    pool.run(n_envs, [&](int w) {
      StudentSlot& slot = slots[static_cast<std::size_t>(w)];
      for (long t = 0; t < steps_per_env; ++t) {
        const ObsPack pack = slot.env->observe(false);
        const Eigen::VectorXd x_norm_d = student.obs_norm.normalize(pack.x);
        const Eigen::VectorXf x = x_norm_d.cast<float>();
        const Eigen::VectorXf zhat = student.phi.forward(slot.hist.window());
        const ActionSample a = student.pi.act(x, zhat, ActMode::Deterministic, nullptr);
        buffer.push(w, x, a.raw, teacher_latent(student, en, slot.env->params()),
                    (static_cast<long>(w) << 40) | slot.episode_id);
        slot.hist.push(x_norm_d, a.raw);
        bool done = false;
        try {
          done = slot.env->step_action(a.raw).done;
        } catch (const SimFault& e) {
          const std::string msg =
              "[distill] simulation fault in env " + std::to_string(w) + ": " + e.what() + "\n";
          std::cerr << msg;
          done = true;
        }
        if (done) {
          slot.env->reset(
              Rng::stream(seed, rng_tag::kEnv, episode_stream_index(w, slot.episode_index)));
          ++slot.episode_index;
          ++slot.episode_id;
          slot.hist.clear();
        }
      }
    });
    global_step += steps_per_env * n_envs;

    double chunk_loss = 0.0;
    for (int u = 0; u < cfg.distill.updates_per_chunk; ++u)
      chunk_loss += phi_train_step(student.phi, opt, buffer, cfg.distill.batch, cfg.distill.lr,
                                   sample_rng, pool, chunk_grads);
    chunk_loss /= cfg.distill.updates_per_chunk;
    if (first_loss < 0.0) first_loss = chunk_loss;
    last_loss = chunk_loss;

    double ev = -1.0, hs = -1.0;
    const bool last_chunk = global_step >= cfg.distill.total_steps;
    if (chunk_index % 50 == 49 || last_chunk) {
      const HoldoutResult hr =
          run_student_holdout(student, cfg, opts, seed, cfg.distill.holdout_episodes, pool);
      ev = hr.ev.total;
      hs = hr.success_rate;
      if (!quiet) {
        const double elapsed = std::chrono::duration<double>(
            std::chrono::steady_clock::now() - t_start).count();
        std::cout << "[distill] step " << global_step << " mse " << chunk_loss << " ev " << ev
                  << " success " << hs << " sps "
                  << static_cast<long>(global_step / std::max(elapsed, 1e-9)) << "\n";
      }
    }

    char row[256];
    std::snprintf(row, sizeof(row), "%ld,%ld,%.9g,%.9g,%.9g\n", chunk_index, global_step,
                  chunk_loss, ev, hs);
    metrics << row;
    metrics.flush();
    ++chunk_index;
  }

  const HoldoutResult final_holdout =
      run_student_holdout(student, cfg, opts, seed, cfg.distill.holdout_episodes, pool);

  student.extra["distill_steps"] = global_step;
  student.extra["holdout_ev"] = final_holdout.ev.total;
  student.extra["first_loss"] = first_loss;
  student.extra["last_loss"] = last_loss;
  Checkpoint ck = student.to_checkpoint("phase2");
  const fs::path final_path = out_dir / "checkpoint_final.bin";
  ck.save(final_path.string());

  TrainPhase2Result r;
  r.final_checkpoint = final_path;
  r.first_loss = first_loss;
  r.last_loss = last_loss;
  r.holdout_ev = final_holdout.ev.total;
  return r;
}

}  // namespace omniquad
