#pragma once

#include "omniquad/config.hpp"
#include "omniquad/dynamics.hpp"
#include "omniquad/highlevel.hpp"
#include "omniquad/policy.hpp"
#include "omniquad/randomization.hpp"

namespace omniquad {

enum class DisturbanceProtocol { None, ExternalForce, MotorFailure };

struct EnvOptions {
  Regime regime = Regime::Train;
  bool randomize = true;         // false: nominal platform every episode
  bool midepisode_shift = true;  // one mass/inertia/CoM re-draw per episode
  DisturbanceProtocol protocol = DisturbanceProtocol::None;
  double toggle_prob = 0.02;     // per-step on/off probability for protocols
  double force_frac_max = 0.5;   // force magnitude cap, fraction of weight
  double episode_time = 0.0;     // 0: use sim config value
  std::optional<QuadParams> fixed_params;  // overrides the platform when set
};

struct ObsPack {
  HighLevelCommand cmd;
  Observation x;           // the 23-dim policy input
  Eigen::VectorXd x_aug;   // x plus integrator states for the LTF variant
};

struct StepInfo {
  RewardTerms reward;
  Termination termination = Termination::Running;
  bool done = false;
};

// One simulated episode loop: platform draw, spawn, latency bookkeeping,
// mid-episode parameter shift, disturbance gating, reward and termination.
// Environments are independent values; run one per worker.
class QuadEnv {
 public:
  QuadEnv(const Config& cfg, const EnvOptions& opts)
      : sim_(cfg.sim), ranges_(cfg.ranges), hl_(cfg.highlevel), spawn_(cfg.spawn), opts_(opts),
        goal_(0.0, 0.0, cfg.eval.goal_height) {
    episode_time_limit_ = opts_.episode_time > 0.0 ? opts_.episode_time : sim_.episode_time;
  }

  void reset(Rng rng) {
    rng_ = rng;
    if (opts_.fixed_params)
      params_ = *opts_.fixed_params;
    else
      params_ = opts_.randomize ? sample_params(rng_, ranges_, opts_.regime)
                                : nominal_params(ranges_, opts_.regime);
    const Vec3 pos(rng_.uniform(-spawn_.xy, spawn_.xy), rng_.uniform(-spawn_.xy, spawn_.xy),
                   rng_.uniform(spawn_.z_min, spawn_.z_max));
    const Mat3 rot = random_rotation_tilt_limited(rng_, spawn_.max_tilt_deg * M_PI / 180.0);
    const Vec3 vel(rng_.uniform(-spawn_.vel, spawn_.vel), rng_.uniform(-spawn_.vel, spawn_.vel),
                   rng_.uniform(-spawn_.vel, spawn_.vel));
    state_ = make_initial_state(sim_, pos, vel, rot, Vec3::Zero());

    // Rotors spin at (clamped) hover speed at spawn; the previous action is
    // kept consistent with them so the first smoothness term is zero.
    const double w0 = std::min(hover_motor_speed(params_), params_.max_motor_speed);
    state_.motor_speeds = Vec4::Constant(w0);
    state_.motor_commands = Vec4::Constant(w0);
    prev_motor_cmd_ = state_.motor_commands;
    prev_action_raw_ = Vec4::Constant(std::clamp(2.0 * w0 / kOmegaScale - 1.0, -1.0, 1.0));
    refill_latency_buffer(state_, params_);

    have_shift_ = opts_.midepisode_shift;
    if (have_shift_)
      shift_ = schedule_midepisode_shift(rng_, ranges_, opts_.regime, episode_time_limit_, params_);

    state_.active_disturbance.reset();
    if (opts_.protocol == DisturbanceProtocol::ExternalForce) {
      Disturbance d;
      d.kind = DisturbanceKind::ExternalForce;
      const double weight = (params_.mass + params_.payload_mass) * kGravity;
      const double magnitude = rng_.uniform(0.0, opts_.force_frac_max * weight);
      Vec3 dir;
      do {
        dir = Vec3(rng_.uniform(-1, 1), rng_.uniform(-1, 1), rng_.uniform(-1, 1));
      } while (dir.norm() < 1e-6);
      d.force = magnitude * dir.normalized();
      d.active = rng_.bernoulli(0.5);
      state_.active_disturbance = d;
    } else if (opts_.protocol == DisturbanceProtocol::MotorFailure) {
      Disturbance d;
      d.kind = DisturbanceKind::MotorEfficiencyLoss;
      d.motor_index = static_cast<int>(rng_.uniform_index(4));
      d.efficiency = rng_.uniform();
      d.active = rng_.bernoulli(0.5);
      state_.active_disturbance = d;
    }

    episode_time_ = 0.0;
    steps_ = 0;
    integ_omega_.setZero();
    integ_c_ = 0.0;
    observed_ = false;
  }

  // High-level command and policy observation, both computed from the
  // latency-delayed state (what the platform would actually know).
  ObsPack observe(bool with_integrators = false) {
    const StateSnapshot& snap = state_.delayed();
    ObsPack pack;
    pack.cmd = compute_command(snap.position, snap.velocity, snap.rotation, goal_, hl_);
    pack.x = omniquad::observe(state_, pack.cmd, prev_action_raw_);
    if (with_integrators) {
      pack.x_aug.resize(kObservationDim + 4);
      pack.x_aug.head<kObservationDim>() = pack.x;
      pack.x_aug.segment<3>(kObservationDim) = integ_omega_;
      pack.x_aug[kObservationDim + 3] = integ_c_;
    } else {
      pack.x_aug = pack.x;
    }
    last_cmd_ = pack.cmd;
    observed_ = true;
    return pack;
  }

  // Advances one control step (= one physics step) with a raw action in
  // [-1,1]^4. observe() must have been called for this step.
  StepInfo step_action(const Vec4& raw_action) {
    return advance(motor_speed_from_raw(raw_action), raw_action);
  }

  // Direct motor-speed command path for classical controllers (not subject
  // to the learned action scale).
  StepInfo step_motor(const Vec4& motor_cmd) {
    const Vec4 raw_equiv =
        (2.0 * motor_cmd / kOmegaScale - Vec4::Ones()).cwiseMax(-1.0).cwiseMin(1.0);
    return advance(motor_cmd, raw_equiv);
  }

 private:
  StepInfo advance(const Vec4& motor_cmd, const Vec4& raw_action) {
    if (!observed_) throw std::logic_error("QuadEnv: observe() must precede step_action()");
    observed_ = false;

    if (have_shift_ && episode_time_ + 1e-12 >= shift_.t_shift) {
      params_ = apply_shift(params_, shift_.delta);
      have_shift_ = false;
    }
    if (state_.active_disturbance && opts_.toggle_prob > 0.0) {
      if (rng_.bernoulli(opts_.toggle_prob))
        state_.active_disturbance->active = !state_.active_disturbance->active;
    }

    state_ = omniquad::step(state_, params_, motor_cmd, sim_.dt, sim_);
    episode_time_ += sim_.dt;
    ++steps_;

    StepInfo info;
    info.reward = omniquad::reward(state_, params_, last_cmd_, state_.motor_commands,
                                   prev_motor_cmd_, sim_.dt);
    SimConfig term_cfg = sim_;
    term_cfg.episode_time = episode_time_limit_;
    info.termination = is_terminated(state_, episode_time_, term_cfg);
    info.done = info.termination != Termination::Running;

    // LTF integrator states: delayed rate error and measured thrust error
    // against the commands computed from the same delayed view.
    const StateSnapshot& snap = state_.delayed();
    integ_omega_ += (snap.angular_velocity - last_cmd_.omega_des) * sim_.dt;
    integ_omega_ = integ_omega_.cwiseMax(-kAntiWindup).cwiseMin(kAntiWindup);
    integ_c_ = std::clamp(integ_c_ + (snap.z_accel - last_cmd_.c_des) * sim_.dt, -kAntiWindup,
                          kAntiWindup);

    prev_motor_cmd_ = state_.motor_commands;
    prev_action_raw_ = raw_action;
    return info;
  }

 public:
  // Sudden payload change (the intrinsics-analysis scenario): adds a point
  // mass at the given body-frame offset. Part of e, so the teacher intrinsics
  // move with it.
  void add_payload(double added_mass, const Vec3& offset) {
    const double total = params_.payload_mass + added_mass;
    if (total > 0.0) {
      params_.payload_offset =
          (params_.payload_offset * params_.payload_mass + offset * added_mass) / total;
    }
    params_.payload_mass = total;
  }

  // Ground-truth side information for the training critic: current rotation,
  // rates, velocity, motor speeds and goal offset, none of it delayed.
  Eigen::VectorXd privileged_state() const {
    Eigen::VectorXd p(kPrivilegedDim);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p[3 * r + c] = state_.rotation(r, c);
    p.segment<3>(9) = state_.angular_velocity;
    p.segment<3>(12) = state_.velocity;
    p.segment<4>(15) = state_.motor_speeds / kOmegaScale;
    p.segment<3>(19) = goal_ - state_.position;
    return p;
  }

  const SimState& state() const { return state_; }
  const QuadParams& params() const { return params_; }
  const Vec3& goal() const { return goal_; }
  double episode_time() const { return episode_time_; }
  double episode_time_limit() const { return episode_time_limit_; }
  long steps() const { return steps_; }
  const Vec4& prev_action() const { return prev_action_raw_; }
  const HighLevelCommand& last_cmd() const { return last_cmd_; }
  const HighLevelGains& highlevel_gains() const { return hl_; }
  const SimConfig& sim_config() const { return sim_; }

  void set_goal(const Vec3& goal) { goal_ = goal; }
  void override_episode_time(double t) { episode_time_limit_ = t; }

  static constexpr double kAntiWindup = 5.0;

 private:
  SimConfig sim_;
  Ranges ranges_;
  HighLevelGains hl_;
  SpawnConfig spawn_;
  EnvOptions opts_;
  Vec3 goal_;
  double episode_time_limit_ = 5.0;

  Rng rng_;
  QuadParams params_;
  SimState state_;
  ShiftSchedule shift_;
  bool have_shift_ = false;
  HighLevelCommand last_cmd_;
  Vec4 prev_action_raw_ = Vec4::Zero();
  Vec4 prev_motor_cmd_ = Vec4::Zero();
  Vec3 integ_omega_ = Vec3::Zero();
  double integ_c_ = 0.0;
  double episode_time_ = 0.0;
  long steps_ = 0;
  bool observed_ = false;
};

}  // namespace omniquad
