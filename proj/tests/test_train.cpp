#include <catch2/catch.hpp>

#include "omniquad/distill.hpp"
#include "omniquad/train.hpp"

using namespace omniquad;

namespace {

Config small_config() {
  Config cfg;
  cfg.ppo.n_envs = 2;
  cfg.ppo.horizon = 64;
  cfg.ppo.minibatch = 64;
  cfg.ppo.epochs = 2;
  cfg.ppo.workers = 2;
  return cfg;
}

RolloutBatch synthetic_batch(int n_envs, int horizon, Rng& rng, double done_prob = 0.08) {
  RolloutBatch b;
  b.resize(n_envs, horizon, kObservationDim, 0);
  for (long g = 0; g < b.size(); ++g) {
    b.reward[g] = static_cast<float>(rng.normal());
    b.value[g] = static_cast<float>(rng.normal());
    const bool done = rng.bernoulli(done_prob);
    b.done[static_cast<std::size_t>(g)] = done ? 1 : 0;
    b.bootstrap[g] = done && rng.bernoulli(0.5) ? static_cast<float>(rng.normal()) : 0.0f;
  }
  for (int w = 0; w < n_envs; ++w) {
    b.end_done[static_cast<std::size_t>(w)] = b.done[static_cast<std::size_t>((w + 1) * horizon - 1)];
    b.end_value[w] = static_cast<float>(rng.normal());
  }
  return b;
}

}  // namespace

TEST_CASE("gae base cases", "[train]") {
  SECTION("single terminal step with zero values") {
    RolloutBatch b;
    b.resize(1, 1, kObservationDim, 0);
    b.reward[0] = 1.0f;
    b.value[0] = 0.0f;
    b.done[0] = 1;
    b.bootstrap[0] = 0.0f;
    const Advantages a = gae_advantages(b, 0.99, 0.95);
    REQUIRE(a.adv[0] == Approx(1.0));
    REQUIRE(a.returns[0] == Approx(1.0));
  }

  SECTION("self-consistent value gives near-zero advantages") {
    const double gamma = 0.95, c = 0.3;
    RolloutBatch b;
    b.resize(1, 50, kObservationDim, 0);
    const double v = c / (1.0 - gamma);
    for (long g = 0; g < 50; ++g) {
      b.reward[g] = static_cast<float>(c);
      b.value[g] = static_cast<float>(v);
    }
    b.end_value[0] = static_cast<float>(v);
    const Advantages a = gae_advantages(b, gamma, 0.9);
    REQUIRE(a.adv.cwiseAbs().maxCoeff() < 1e-5);  // float storage of v
  }

  SECTION("timeup bootstraps, crash does not") {
    RolloutBatch b;
    b.resize(1, 2, kObservationDim, 0);
    b.reward[0] = 0.0f;
    b.value[0] = 0.0f;
    b.done[0] = 1;
    b.bootstrap[0] = 2.0f;  // TimeUp at step 0
    b.reward[1] = 0.0f;
    b.value[1] = 0.0f;
    b.done[1] = 1;
    b.bootstrap[1] = 0.0f;  // Crash at step 1
    const Advantages a = gae_advantages(b, 0.5, 1.0);
    REQUIRE(a.adv[0] == Approx(0.5 * 2.0));
    REQUIRE(a.adv[1] == Approx(0.0));
  }
}

TEST_CASE("gae matches the brute-force discounted-sum oracle", "[train]") {
  Rng rng(11);
  const double gamma = 0.99, lam = 0.95;
  for (int rep = 0; rep < 20; ++rep) {
    RolloutBatch b = synthetic_batch(2, 10, rng, 0.15);
    const Advantages fast = gae_advantages(b, gamma, lam);

    // Oracle: adv[t] = sum_l (gamma*lam)^l * delta[t+l] until the episode
    // boundary, with the documented bootstrap rules.
    for (int w = 0; w < 2; ++w) {
      for (int t = 0; t < 10; ++t) {
        double acc = 0.0, scale = 1.0;
        for (int l = t; l < 10; ++l) {
          const long g = w * 10 + l;
          const bool done = b.done[static_cast<std::size_t>(g)] != 0;
          double next_v;
          if (done)
            next_v = b.bootstrap[g];
          else if (l == 9)
            next_v = b.end_value[w];
          else
            next_v = b.value[g + 1];
          const double delta = b.reward[g] + gamma * next_v - b.value[g];
          acc += scale * delta;
          if (done) break;
          scale *= gamma * lam;
        }
        REQUIRE(fast.adv[w * 10 + t] == Approx(acc).margin(1e-10));
        REQUIRE(fast.returns[w * 10 + t] == Approx(acc + b.value[w * 10 + t]).margin(1e-10));
      }
    }
  }
}

namespace {

// Straight-line reference implementation of the clipped PPO objective, one
// sample at a time, double precision throughout.
double reference_ppo_loss(const GaussianPolicy<double>& pi, const Encoder<double>* mu,
                          const nn::Mlp<double>& value, const PpoMinibatch<double>& mb,
                          const PpoConfig& cfg) {
  const long n = mb.obs.cols();
  constexpr double kLog2Pi = 1.8378770664093453;
  double pg = 0.0, v_loss = 0.0;
  for (long i = 0; i < n; ++i) {
    nn::VecX<double> latent;
    if (pi.latent_dim > 0)
      latent = mu ? mu->net.forward_one(mb.e_norm.col(i)) : nn::VecX<double>(mb.e_norm.col(i));
    nn::VecX<double> in(pi.obs_dim + pi.latent_dim);
    in.head(pi.obs_dim) = mb.obs.col(i);
    if (pi.latent_dim > 0) in.tail(pi.latent_dim) = latent;
    const nn::VecX<double> mean = pi.net.forward_one(in);
    double logp = 0.0;
    for (int k = 0; k < kActionDim; ++k) {
      const double ls = pi.log_std.tensors[0](k, 0);
      const double d = (mb.pre_tanh(k, i) - mean[k]) / std::exp(ls);
      logp += -0.5 * d * d - ls - 0.5 * kLog2Pi;
    }
    const double ratio = std::exp(logp - mb.old_logp[i]);
    const double clipped = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    pg += -std::min(ratio * mb.adv[i], clipped * mb.adv[i]);
    const double verr = value.forward_one(in)[0] - mb.ret[i];
    v_loss += 0.5 * verr * verr;
  }
  double entropy = 0.5 * (1.0 + kLog2Pi) * kActionDim;
  for (int k = 0; k < kActionDim; ++k) entropy += pi.log_std.tensors[0](k, 0);
  return pg / n + cfg.value_coef * v_loss / n - cfg.entropy_coef * entropy;
}

}  // namespace

TEST_CASE("ppo loss matches a straight-line reference implementation", "[train]") {
  Rng rng(21);
  auto pi = GaussianPolicy<double>::init(6, 3, rng, -0.5);
  pi.net = nn::Mlp<double>::init(nn::MlpSpec{{9, 16, 16, kActionDim}}, rng, std::sqrt(2.0), 0.01);
  Encoder<double> mu;
  mu.net = nn::Mlp<double>::init(nn::MlpSpec{{QuadParams::kEnvDim, 12, 3}}, rng);
  auto value = nn::Mlp<double>::init(nn::MlpSpec{{9, 16, 1}}, rng);

  const long b = 32;
  PpoMinibatch<double> mb;
  mb.obs.resize(6, b);
  mb.e_norm.resize(QuadParams::kEnvDim, b);
  mb.pre_tanh.resize(kActionDim, b);
  mb.old_logp.resize(b);
  mb.adv.resize(b);
  mb.ret.resize(b);
  Rng d(33);
  for (long i = 0; i < b; ++i) {
    for (int k = 0; k < 6; ++k) mb.obs(k, i) = d.normal();
    for (int k = 0; k < QuadParams::kEnvDim; ++k) mb.e_norm(k, i) = d.uniform(-1, 1);
    for (int k = 0; k < kActionDim; ++k) mb.pre_tanh(k, i) = d.normal();
    mb.old_logp[i] = d.normal() - 4.0;
    mb.adv[i] = d.normal();
    mb.ret[i] = d.normal();
  }

  PpoConfig cfg;
  typename PpoGrads::Of<double> grads;
  grads.pi = pi.net.params.zeros_like();
  grads.log_std = pi.log_std.zeros_like();
  grads.mu = mu.net.params.zeros_like();
  grads.value = value.params.zeros_like();
  const PpoStats stats = ppo_minibatch_grads<double>(pi, &mu, value, mb, cfg, b, grads);
  const double fast_loss =
      (stats.pg_loss + cfg.value_coef * stats.v_loss - cfg.entropy_coef * stats.entropy) / b;
  const double ref_loss = reference_ppo_loss(pi, &mu, value, mb, cfg);
  REQUIRE(fast_loss == Approx(ref_loss).margin(1e-8));

  SECTION("gradients of the full objective match finite differences") {
    auto loss_fn = [&]() { return reference_ppo_loss(pi, &mu, value, mb, cfg); };
    auto check = [&](nn::TensorList<double>& params, const nn::TensorList<double>& analytic) {
      const double h = 1e-6;
      double worst = 0.0;
      for (std::size_t t = 0; t < params.tensors.size(); ++t) {
        auto& tensor = params.tensors[t];
        for (int i = 0; i < tensor.size(); i += 7) {  // sampled sweep
          const double saved = tensor.data()[i];
          tensor.data()[i] = saved + h;
          const double up = loss_fn();
          tensor.data()[i] = saved - h;
          const double down = loss_fn();
          tensor.data()[i] = saved;
          const double fd = (up - down) / (2 * h);
          const double an = analytic.tensors[t].data()[i];
          worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3}));
        }
      }
      return worst;
    };
    REQUIRE(check(pi.net.params, grads.pi) < 1e-4);
    REQUIRE(check(pi.log_std, grads.log_std) < 1e-4);
    REQUIRE(check(mu.net.params, grads.mu) < 1e-4);
    REQUIRE(check(value.params, grads.value) < 1e-4);
  }

  SECTION("zero advantages leave only the entropy gradient on log_std") {
    mb.adv.setZero();
    grads.pi.set_zero();
    grads.log_std.set_zero();
    grads.mu.set_zero();
    grads.value.set_zero();
    PpoConfig c2 = cfg;
    c2.value_coef = 0.0;
    ppo_minibatch_grads<double>(pi, &mu, value, mb, c2, b, grads);
    REQUIRE(grads.pi.squared_norm() == 0.0);
    for (int k = 0; k < kActionDim; ++k)
      REQUIRE(grads.log_std.tensors[0](k, 0) == Approx(-cfg.entropy_coef).margin(1e-12));
  }

  SECTION("samples clipped with positive advantage contribute no gradient") {
    PpoMinibatch<double> one;
    one.obs = mb.obs.col(0);
    one.e_norm = mb.e_norm.col(0);
    one.pre_tanh = mb.pre_tanh.col(0);
    one.old_logp.resize(1);
    one.adv.resize(1);
    one.ret.resize(1);
    one.adv[0] = 1.0;
    one.ret[0] = 0.0;
    // Make the stored log-prob very low so the ratio blows past 1+clip.
    one.old_logp[0] = -100.0;
    grads.pi.set_zero();
    grads.log_std.set_zero();
    grads.mu.set_zero();
    grads.value.set_zero();
    PpoConfig c2 = cfg;
    c2.value_coef = 0.0;
    c2.entropy_coef = 0.0;
    const PpoStats s = ppo_minibatch_grads<double>(pi, &mu, value, one, c2, 1, grads);
    REQUIRE(s.clip_frac == 1.0);
    REQUIRE(grads.pi.squared_norm() == 0.0);
    REQUIRE(grads.mu.squared_norm() == 0.0);
  }
}

TEST_CASE("rollout bookkeeping", "[train]") {
  Config cfg = small_config();
  EnvOptions opts;
  opts.regime = Regime::Train;

  Rng init(3);
  PolicyBundle bundle = PolicyBundle::init(PolicyVariant::Rma, init);
  bundle.e_norm_ranges = cfg.ranges.test;

  ThreadPool pool(2);
  RolloutWorkerSet envs(cfg, opts, 42, cfg.ppo.n_envs);
  RolloutBatch batch;
  collect_rollouts(bundle, cfg, envs, batch, pool);

  SECTION("batch shape and episode limits") {
    REQUIRE(batch.size() == cfg.ppo.n_envs * cfg.ppo.horizon);
    REQUIRE(batch.obs.cols() == batch.size());
    const long max_steps = static_cast<long>(cfg.sim.episode_time / cfg.sim.dt);
    for (const auto& env_eps : batch.episodes)
      for (const auto& ep : env_eps) REQUIRE(ep.length <= max_steps);
  }

  SECTION("identical seeds reproduce the batch bit for bit") {
    RolloutWorkerSet envs2(cfg, opts, 42, cfg.ppo.n_envs);
    RolloutBatch batch2;
    ThreadPool pool1(1);
    collect_rollouts(bundle, cfg, envs2, batch2, pool1);  // different worker count
    REQUIRE(batch.obs == batch2.obs);
    REQUIRE(batch.pre_tanh == batch2.pre_tanh);
    REQUIRE(batch.log_prob == batch2.log_prob);
    REQUIRE(batch.reward == batch2.reward);
    REQUIRE(batch.done == batch2.done);
  }

  SECTION("different seeds differ") {
    RolloutWorkerSet envs3(cfg, opts, 43, cfg.ppo.n_envs);
    RolloutBatch batch3;
    collect_rollouts(bundle, cfg, envs3, batch3, pool);
    REQUIRE(batch.obs != batch3.obs);
  }
}

TEST_CASE("ppo update is invariant to the worker count", "[train]") {
  Config cfg = small_config();
  EnvOptions opts;

  auto run_once = [&](int workers) {
    Rng init(9);
    PolicyBundle b = PolicyBundle::init(PolicyVariant::Rma, init);
    b.e_norm_ranges = cfg.ranges.test;
    ThreadPool pool(workers);
    RolloutWorkerSet envs(cfg, opts, 5, cfg.ppo.n_envs);
    RolloutBatch batch;
    collect_rollouts(b, cfg, envs, batch, pool);
    const Advantages gae = gae_advantages(batch, cfg.ppo.gamma, cfg.ppo.lam);
    PpoOptimizers opt = PpoOptimizers::make(b);
    Rng lr = Rng::stream(5, rng_tag::kLearner, 0);
    double lr_state = cfg.ppo.lr;
    ppo_update(b, batch, gae, cfg.ppo, opt, lr, pool, lr_state);
    return b;
  };

  PolicyBundle a = run_once(1);
  PolicyBundle b = run_once(2);
  for (std::size_t i = 0; i < a.pi.net.params.tensors.size(); ++i)
    REQUIRE(a.pi.net.params.tensors[i] == b.pi.net.params.tensors[i]);
  for (std::size_t i = 0; i < a.mu.net.params.tensors.size(); ++i)
    REQUIRE(a.mu.net.params.tensors[i] == b.mu.net.params.tensors[i]);
  REQUIRE(a.pi.log_std.tensors[0] == b.pi.log_std.tensors[0]);
}

TEST_CASE("distill buffer windows", "[train]") {
  DistillBuffer buf(2000, 2, kIntrinsicsDim);

  Eigen::VectorXf obs = Eigen::VectorXf::Zero(kObservationDim);
  Eigen::VectorXf z = Eigen::VectorXf::Zero(kIntrinsicsDim);

  SECTION("windows zero-pad before the episode has history") {
    obs[0] = 7.0f;
    z[0] = 1.0f;
    buf.push(0, obs, Vec4::Constant(0.5), z, 1);
    const auto ex = buf.materialize(0, 0);
    // The record's own step is the target; its window has no history yet.
    REQUIRE(ex.window.cwiseAbs().maxCoeff() == 0.0f);
    REQUIRE(ex.target[0] == 1.0f);
  }

  SECTION("windows stop at episode boundaries") {
    for (int i = 0; i < 10; ++i) {
      obs[0] = static_cast<float>(i + 1);
      buf.push(0, obs, Vec4::Zero(), z, 1);
    }
    for (int i = 0; i < 5; ++i) {
      obs[0] = static_cast<float>(100 + i);
      buf.push(0, obs, Vec4::Zero(), z, 2);
    }
    // Record 12 (0-based age order) = third step of episode 2: its window
    // holds exactly the two preceding episode-2 records.
    const auto ex = buf.materialize(0, 12);
    REQUIRE(ex.window(0, kHistoryLen - 1) == 101.0f);
    REQUIRE(ex.window(0, kHistoryLen - 2) == 100.0f);
    REQUIRE(ex.window.leftCols(kHistoryLen - 2).cwiseAbs().maxCoeff() == 0.0f);
  }

  SECTION("FIFO eviction overwrites the oldest records") {
    const long cap = 1000;  // per-env share of 2000 across 2 envs
    for (long i = 0; i < cap + 10; ++i) {
      obs[0] = static_cast<float>(i);
      buf.push(0, obs, Vec4::Zero(), z, 1);
    }
    REQUIRE(buf.size() == cap);
    const auto ex = buf.materialize(0, cap - 1);  // newest record
    REQUIRE(ex.window(0, kHistoryLen - 1) == static_cast<float>(cap + 8));
  }
}

TEST_CASE("phi converges to a constant encoder target", "[train]") {
  // Constant-target regression: the head bias alone can express the optimum,
  // so the loss must collapse toward zero.
  Rng rng(17);
  auto phi = AdaptationModule<float>::init(kIntrinsicsDim, rng);
  PhiOptimizers opt = PhiOptimizers::make(phi);
  DistillBuffer buf(4000, 1, kIntrinsicsDim);

  Eigen::VectorXf c(kIntrinsicsDim);
  c << 0.4f, -0.2f, 0.9f, 0.0f, -0.6f, 0.3f;
  Rng data(5);
  Eigen::VectorXf obs(kObservationDim);
  for (int i = 0; i < 1200; ++i) {
    for (int k = 0; k < kObservationDim; ++k) obs[k] = static_cast<float>(data.normal());
    buf.push(0, obs, Vec4::Constant(data.uniform(-1, 1)), c, i / 300);
  }

  ThreadPool pool(2);
  std::vector<PhiGrads> scratch;
  Rng sample_rng(99);
  double first = 0.0, last = 0.0;
  for (int it = 0; it < 150; ++it) {
    const double loss = phi_train_step(phi, opt, buf, 16, 3e-3, sample_rng, pool, scratch);
    if (it == 0) first = loss;
    last = loss;
  }
  REQUIRE(last < 0.05 * first);

  // Prediction lands near the constant for an arbitrary window.
  const auto ex = buf.materialize(0, 600);
  const Eigen::VectorXf zhat = phi.forward(ex.window);
  REQUIRE((zhat - c).norm() < 0.2);
}

TEST_CASE("explained variance", "[train]") {
  std::vector<Eigen::VectorXf> t, p;
  Rng rng(31);
  for (int i = 0; i < 500; ++i) {
    Eigen::VectorXf z(3);
    z << static_cast<float>(rng.normal()), static_cast<float>(2 * rng.normal()),
        static_cast<float>(0.5 * rng.normal());
    t.push_back(z);
    p.push_back(z);  // perfect prediction
  }
  REQUIRE(explained_variance(t, p).total == Approx(1.0));

  std::vector<Eigen::VectorXf> mean_pred(t.size(), Eigen::VectorXf::Zero(3));
  const double ev0 = explained_variance(t, mean_pred).total;
  REQUIRE(ev0 == Approx(0.0).margin(0.05));  // mean predictor explains nothing
}
