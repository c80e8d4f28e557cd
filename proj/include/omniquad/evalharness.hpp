#pragma once

#include "omniquad/controllers.hpp"

namespace omniquad {

enum class ScenarioKind { Stabilization, OodForces, OodMotorFailure, PayloadStep, MovingGoal };

inline ScenarioKind scenario_from_name(const std::string& name) {
  if (name == "stabilization") return ScenarioKind::Stabilization;
  if (name == "ood-forces") return ScenarioKind::OodForces;
  if (name == "ood-motor") return ScenarioKind::OodMotorFailure;
  if (name == "payload-step") return ScenarioKind::PayloadStep;
  if (name == "moving-goal") return ScenarioKind::MovingGoal;
  throw std::runtime_error(
      "unknown scenario '" + name +
      "'; available: stabilization ood-forces ood-motor payload-step moving-goal");
}

inline const char* scenario_name(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::Stabilization: return "stabilization";
    case ScenarioKind::OodForces: return "ood-forces";
    case ScenarioKind::OodMotorFailure: return "ood-motor";
    case ScenarioKind::PayloadStep: return "payload-step";
    case ScenarioKind::MovingGoal: return "moving-goal";
  }
  return "?";
}

struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::Stabilization;
  Regime regime = Regime::Test;
  int episodes = 100;
  std::uint64_t seed = 0;
};

struct EpisodeRow {
  int episode = 0;
  bool success = false;
  bool crashed = false;
  bool fault = false;
  double height_err = 0.0;   // mean |z - goal_z| over the episode
  double angvel_err = 0.0;   // mean |omega - omega_des|
  double thrust_err = 0.0;   // mean |c - c_des|
  double final_height = 0.0;
  int steps = 0;
};

struct EvalMetrics {
  double success_rate = 0.0;
  // Tracking errors are averaged over successful episodes only.
  double height_err = 0.0;
  double angvel_err = 0.0;
  double thrust_err = 0.0;
  long episodes = 0;
  std::vector<EpisodeRow> rows;
};

inline EnvOptions scenario_env_options(const ScenarioSpec& spec, const Config& cfg) {
  EnvOptions opts;
  opts.regime = spec.regime;
  opts.randomize = true;
  opts.midepisode_shift = false;
  opts.toggle_prob = cfg.eval.toggle_prob;
  opts.force_frac_max = cfg.eval.force_frac_max;
  switch (spec.kind) {
    case ScenarioKind::OodForces:
      opts.protocol = DisturbanceProtocol::ExternalForce;
      break;
    case ScenarioKind::OodMotorFailure:
      opts.protocol = DisturbanceProtocol::MotorFailure;
      break;
    default:
      opts.protocol = DisturbanceProtocol::None;
      break;
  }
  return opts;
}

// One evaluated episode under the paired stream for its index.
inline EpisodeRow run_episode(Controller& controller, QuadEnv& env, const Config& cfg,
                              int episode_index, std::uint64_t seed,
                              ScenarioKind kind = ScenarioKind::Stabilization) {
  env.reset(Rng::stream(seed, rng_tag::kEvalEpisode, static_cast<std::uint64_t>(episode_index)));
  controller.reset(env);

  EpisodeRow row;
  row.episode = episode_index;
  double height_sum = 0.0, ang_sum = 0.0, thrust_sum = 0.0;
  const double circle_period = 8.0, circle_radius = 1.0;

  while (true) {
    if (kind == ScenarioKind::MovingGoal) {
      const double t = env.episode_time();
      env.set_goal(Vec3(circle_radius * std::cos(2.0 * M_PI * t / circle_period),
                        circle_radius * std::sin(2.0 * M_PI * t / circle_period),
                        cfg.eval.goal_height));
    }
    StepInfo info;
    try {
      const Controller::Action a = controller.act(env);
      info = a.use_raw ? env.step_action(a.raw) : env.step_motor(a.motor_cmd);
    } catch (const L1ControllerFault&) {
      row.fault = true;
      break;
    } catch (const SimFault&) {
      row.fault = true;
      break;
    }
    height_sum += std::abs(env.state().position.z() - env.goal().z());
    ang_sum += (env.state().angular_velocity - env.last_cmd().omega_des).norm();
    thrust_sum += std::abs(measured_z_accel(env.state(), env.params()) - env.last_cmd().c_des);
    ++row.steps;
    if (info.done) {
      row.crashed = info.termination == Termination::Crashed;
      break;
    }
  }

  row.final_height = env.state().position.z();
  row.success = !row.fault && !row.crashed &&
                std::abs(row.final_height - env.goal().z()) <= cfg.eval.success_band;
  if (row.steps > 0) {
    row.height_err = height_sum / row.steps;
    row.angvel_err = ang_sum / row.steps;
    row.thrust_err = thrust_sum / row.steps;
  }
  return row;
}

inline EvalMetrics aggregate_rows(std::vector<EpisodeRow> rows) {
  EvalMetrics m;
  m.episodes = static_cast<long>(rows.size());
  long successes = 0;
  for (const auto& r : rows) {
    if (r.success) {
      ++successes;
      m.height_err += r.height_err;
      m.angvel_err += r.angvel_err;
      m.thrust_err += r.thrust_err;
    }
  }
  m.success_rate = m.episodes > 0 ? static_cast<double>(successes) / m.episodes : 0.0;
  if (successes > 0) {
    m.height_err /= successes;
    m.angvel_err /= successes;
    m.thrust_err /= successes;
  }
  m.rows = std::move(rows);
  return m;
}

// Paired-seed evaluation: episode i always draws the same platform, spawn and
// disturbance, no matter which controller runs it.
inline EvalMetrics run_scenario(const ControllerFactory& factory, const ScenarioSpec& spec,
                                const Config& cfg, ThreadPool& pool) {
  const EnvOptions opts = scenario_env_options(spec, cfg);
  std::vector<EpisodeRow> rows(static_cast<std::size_t>(spec.episodes));
  pool.run(spec.episodes, [&](int ep) {
    QuadEnv env(cfg, opts);
    std::unique_ptr<Controller> controller = factory();
    rows[static_cast<std::size_t>(ep)] = run_episode(*controller, env, cfg, ep, spec.seed, spec.kind);
  });
  return aggregate_rows(std::move(rows));
}

inline EvalMetrics run_stabilization(const ControllerFactory& f, const ScenarioSpec& spec,
                                     const Config& cfg, ThreadPool& pool) {
  ScenarioSpec s = spec;
  s.kind = ScenarioKind::Stabilization;
  return run_scenario(f, s, cfg, pool);
}

inline EvalMetrics run_ood_forces(const ControllerFactory& f, const ScenarioSpec& spec,
                                  const Config& cfg, ThreadPool& pool) {
  ScenarioSpec s = spec;
  s.kind = ScenarioKind::OodForces;
  return run_scenario(f, s, cfg, pool);
}

inline EvalMetrics run_ood_motor_failure(const ControllerFactory& f, const ScenarioSpec& spec,
                                         const Config& cfg, ThreadPool& pool) {
  ScenarioSpec s = spec;
  s.kind = ScenarioKind::OodMotorFailure;
  return run_scenario(f, s, cfg, pool);
}

// ---------------------------------------------------------------------------
// Payload-step scenario (the intrinsics analysis): hover on the nominal
// platform, add payload mass at the scheduled times, log the estimated and
// teacher intrinsics plus the height at every control step.
// ---------------------------------------------------------------------------

struct PayloadLogRow {
  double t = 0.0;
  Eigen::VectorXf z_hat;
  Eigen::VectorXf z_teacher;
  double height = 0.0;
};

struct PayloadRunResult {
  std::vector<PayloadLogRow> rows;
  std::vector<double> step_times;
  bool fault = false;
};

inline PayloadRunResult run_payload_step(const PolicyBundle& bundle, const Config& cfg,
                                         std::uint64_t seed) {
  if (!bundle.has_phi)
    throw std::runtime_error("payload-step scenario needs an adaptive (phase2) controller");

  Config scenario_cfg = cfg;
  scenario_cfg.spawn.xy = 0.0;
  scenario_cfg.spawn.z_min = scenario_cfg.spawn.z_max = cfg.eval.goal_height;
  scenario_cfg.spawn.vel = 0.0;
  scenario_cfg.spawn.max_tilt_deg = 0.0;

  EnvOptions opts;
  opts.regime = Regime::Test;
  opts.randomize = false;  // nominal platform
  opts.midepisode_shift = false;
  opts.episode_time = cfg.eval.payload_duration;

  QuadEnv env(scenario_cfg, opts);
  env.reset(Rng::stream(seed, rng_tag::kEvalEpisode, 0));
  LearnedController controller(std::make_shared<PolicyBundle>(bundle));
  controller.reset(env);
  const EnvNormalizer en(bundle.e_norm_ranges);
  const double base_mass = env.params().mass;

  PayloadRunResult result;
  result.step_times = cfg.eval.payload_step_times;
  std::size_t next_step = 0;

  while (true) {
    if (next_step < result.step_times.size() &&
        env.episode_time() + 1e-12 >= result.step_times[next_step]) {
      env.add_payload(cfg.eval.payload_step_frac * base_mass,
                      Vec3(0.05 * env.params().arm_length, 0.0, kPayloadZOffset));
      ++next_step;
    }
    StepInfo info;
    Controller::Action a;
    try {
      a = controller.act(env);
      info = env.step_action(a.raw);
    } catch (const SimFault&) {
      result.fault = true;
      break;
    }
    PayloadLogRow row;
    row.t = env.episode_time();
    row.z_hat = controller.last_latent();
    row.z_teacher = teacher_latent(bundle, en, env.params());
    row.height = env.state().position.z();
    result.rows.push_back(std::move(row));
    if (info.done) break;
  }
  return result;
}

// A7-style recovery analysis: after each payload step, the smoothed
// |z_hat - z_teacher| must re-enter `factor` times its pre-step baseline
// within `window` seconds, and the height must be back inside the band.
struct AdaptationCheck {
  bool ok = true;
  struct PerStep {
    double t_step = 0.0;
    double baseline = 0.0;
    double recovery_time = -1.0;  // s after the step; -1 = never
    double height_err_at_deadline = 0.0;
    bool recovered = false;
    bool height_ok = false;
  };
  std::vector<PerStep> steps;
};

inline AdaptationCheck check_adaptation_recovery(const PayloadRunResult& run, double goal_height,
                                                 double dt, double factor = 1.5,
                                                 double window = 2.5, double band = 0.3) {
  AdaptationCheck check;
  const long n = static_cast<long>(run.rows.size());
  std::vector<double> err(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i)
    err[static_cast<std::size_t>(i)] =
        (run.rows[static_cast<std::size_t>(i)].z_hat - run.rows[static_cast<std::size_t>(i)].z_teacher)
            .norm();
  // 0.1 s moving mean.
  const long w = std::max<long>(1, static_cast<long>(std::lround(0.1 / dt)));
  std::vector<double> smooth(static_cast<std::size_t>(n));
  double acc = 0.0;
  for (long i = 0; i < n; ++i) {
    acc += err[static_cast<std::size_t>(i)];
    if (i >= w) acc -= err[static_cast<std::size_t>(i - w)];
    smooth[static_cast<std::size_t>(i)] = acc / std::min(i + 1, w);
  }

  for (const double t_step : run.step_times) {
    AdaptationCheck::PerStep s;
    s.t_step = t_step;
    const long i_step = static_cast<long>(std::lround(t_step / dt));
    const long i_base0 = std::max<long>(0, i_step - static_cast<long>(std::lround(1.0 / dt)));
    double base = 0.0;
    long base_n = 0;
    for (long i = i_base0; i < std::min(i_step, n); ++i) {
      base += smooth[static_cast<std::size_t>(i)];
      ++base_n;
    }
    s.baseline = base_n > 0 ? base / base_n : 0.0;
    const long i_end = std::min<long>(n - 1, i_step + static_cast<long>(std::lround(window / dt)));
    // Skip the first 0.15 s so the spike itself registers before recovery.
    for (long i = std::min(n - 1, i_step + static_cast<long>(std::lround(0.15 / dt))); i <= i_end; ++i) {
      if (smooth[static_cast<std::size_t>(i)] <= factor * s.baseline + 1e-9) {
        s.recovered = true;
        s.recovery_time = (i - i_step) * dt;
        break;
      }
    }
    if (i_end >= 0 && i_end < n) {
      s.height_err_at_deadline =
          std::abs(run.rows[static_cast<std::size_t>(i_end)].height - goal_height);
      s.height_ok = s.height_err_at_deadline <= band;
    }
    check.ok = check.ok && s.recovered && s.height_ok;
    check.steps.push_back(s);
  }
  return check;
}

// ---------------------------------------------------------------------------
// Controller comparison and file emission.
// ---------------------------------------------------------------------------

struct ComparisonEntry {
  std::string controller;
  EvalMetrics metrics;
};

inline std::vector<ComparisonEntry> compare_controllers(
    const std::vector<std::pair<std::string, ControllerFactory>>& controllers,
    const ScenarioSpec& spec, const Config& cfg, ThreadPool& pool) {
  std::vector<ComparisonEntry> out;
  for (const auto& [name, factory] : controllers)
    out.push_back({name, run_scenario(factory, spec, cfg, pool)});
  return out;
}

inline void write_episode_csv(const std::string& path, const EvalMetrics& m,
                              const std::string& config_hash) {
  std::ofstream out(path, std::ios::trunc);
  out << "# config_hash=" << config_hash << "\n";
  out << "episode,success,crashed,fault,height_err,angvel_err,thrust_err,final_height,steps\n";
  for (const auto& r : m.rows) {
    char row[256];
    std::snprintf(row, sizeof(row), "%d,%d,%d,%d,%.9g,%.9g,%.9g,%.9g,%d\n", r.episode,
                  r.success ? 1 : 0, r.crashed ? 1 : 0, r.fault ? 1 : 0, r.height_err,
                  r.angvel_err, r.thrust_err, r.final_height, r.steps);
    out << row;
  }
}

inline nlohmann::json metrics_json(const std::string& controller, const ScenarioSpec& spec,
                                   const EvalMetrics& m) {
  return {{"controller", controller},
          {"scenario", scenario_name(spec.kind)},
          {"episodes", m.episodes},
          {"success_rate", m.success_rate},
          {"height_err", m.height_err},
          {"angvel_err", m.angvel_err},
          {"thrust_err", m.thrust_err}};
}

inline std::string format_table(const std::vector<ComparisonEntry>& entries) {
  std::ostringstream out;
  out << std::left << std::setw(10) << "method" << std::right << std::setw(10) << "success"
      << std::setw(14) << "height_err" << std::setw(14) << "angvel_err" << std::setw(14)
      << "thrust_err" << "\n";
  for (const auto& e : entries) {
    char row[160];
    std::snprintf(row, sizeof(row), "%-10s%9.0f%%%14.3f%14.3f%14.3f\n", e.controller.c_str(),
                  100.0 * e.metrics.success_rate, e.metrics.height_err, e.metrics.angvel_err,
                  e.metrics.thrust_err);
    out << row;
  }
  return out.str();
}

inline void write_payload_log_csv(const std::string& path, const PayloadRunResult& run,
                                  const std::string& config_hash) {
  std::ofstream out(path, std::ios::trunc);
  out << "# config_hash=" << config_hash << "\n";
  out << "t";
  for (int k = 0; k < kIntrinsicsDim; ++k) out << ",zhat" << k;
  for (int k = 0; k < kIntrinsicsDim; ++k) out << ",z" << k;
  out << ",height\n";
  for (const auto& r : run.rows) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", r.t);
    out << buf;
    for (int k = 0; k < kIntrinsicsDim; ++k) {
      std::snprintf(buf, sizeof(buf), ",%.9g", static_cast<double>(r.z_hat[k]));
      out << buf;
    }
    for (int k = 0; k < kIntrinsicsDim; ++k) {
      std::snprintf(buf, sizeof(buf), ",%.9g", static_cast<double>(r.z_teacher[k]));
      out << buf;
    }
    std::snprintf(buf, sizeof(buf), ",%.9g\n", r.height);
    out << buf;
  }
}

}  // namespace omniquad
