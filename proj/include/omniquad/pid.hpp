#pragma once

#include "omniquad/env.hpp"

namespace omniquad {

// Model-based cascaded PID: position PID to desired acceleration, reduced
// attitude error to body rates, rate P loop to torque, exact allocation with
// the platform's true mass, inertia and motor constant. The model inversion
// is what lets one normalized gain set serve very different platforms;
// tune_pid_gains refines them for a specific one.
struct PidGains {
  double kp_pos = 9.0;    // 1/s^2
  double kd_pos = 4.2;    // 1/s
  double ki_pos = 2.0;    // 1/s^3
  double att_tau = 0.15;  // s
  double k_rate = 25.0;   // 1/s
  double integral_limit = 1.0;  // m s
  double a_max = 50.0;    // m/s^2
};

class PidController {
 public:
  PidController(const QuadParams& platform, const PidGains& gains = {})
      : params_(platform), eff_(effective_body(platform)), gains_(gains) {}

  void reset() { integral_.setZero(); }

  // One control step from the true state (classical controllers read the
  // undelayed simulator state).
  Vec4 motor_command(const SimState& s, const Vec3& goal, double dt) {
    const Vec3 err = goal - s.position;
    integral_ += err * dt;
    integral_ = integral_.cwiseMax(-gains_.integral_limit).cwiseMin(gains_.integral_limit);

    Vec3 a_cmd = gains_.kp_pos * err - gains_.kd_pos * s.velocity + gains_.ki_pos * integral_ +
                 Vec3(0.0, 0.0, kGravity);
    const double a_norm = a_cmd.norm();
    if (a_norm > gains_.a_max) a_cmd *= gains_.a_max / a_norm;

    Vec3 dir = a_cmd;
    if (dir.norm() < 1e-9) dir = s.rotation.col(2);
    dir.normalize();
    const Vec3 omega_des = reduced_attitude_error(s.rotation, dir) / gains_.att_tau;

    const double thrust =
        std::max(eff_.m_total * a_cmd.dot(s.rotation.col(2)), 0.05 * eff_.m_total * kGravity);
    const Vec3 torque = eff_.inertia * (gains_.k_rate * (omega_des - s.angular_velocity)) +
                        s.angular_velocity.cross(eff_.inertia * s.angular_velocity);
    return allocate_motor_speeds(thrust, torque, params_, eff_.com_offset);
  }

  const Vec3& integral() const { return integral_; }

 private:
  QuadParams params_;
  EffectiveBody eff_;
  PidGains gains_;
  Vec3 integral_ = Vec3::Zero();
};

// Mean absolute height error of a short hover episode; crash dominates.
inline double pid_hover_cost(const QuadParams& platform, const PidGains& gains, const Config& cfg,
                             std::uint64_t seed, int episodes = 4) {
  double cost = 0.0;
  for (int ep = 0; ep < episodes; ++ep) {
    EnvOptions opts;
    opts.randomize = false;
    opts.midepisode_shift = false;
    QuadEnv env(cfg, opts);
    env.reset(Rng::stream(seed, rng_tag::kEvalEpisode, static_cast<std::uint64_t>(ep)));
    PidController pid(platform, gains);
    pid.reset();
    double err_sum = 0.0;
    long steps = 0;
    bool crashed = false;
    while (true) {
      env.observe(false);
      const Vec4 cmd = pid.motor_command(env.state(), env.goal(), cfg.sim.dt);
      StepInfo info;
      try {
        info = env.step_motor(cmd);
      } catch (const SimFault&) {
        crashed = true;
        break;
      }
      err_sum += std::abs(env.state().position.z() - env.goal().z());
      ++steps;
      if (info.done) {
        crashed = info.termination == Termination::Crashed;
        break;
      }
    }
    cost += crashed ? 10.0 : err_sum / std::max<long>(steps, 1);
  }
  return cost / episodes;
}

// Coarse grid search around the default gains on the given platform.
inline PidGains tune_pid_gains(const QuadParams& platform, const Config& cfg, std::uint64_t seed) {
  PidGains best;
  double best_cost = pid_hover_cost(platform, best, cfg, seed);
  for (const double kp : {4.0, 9.0, 16.0})
    for (const double kd : {2.8, 4.2, 6.0})
      for (const double kr : {15.0, 25.0, 40.0}) {
        PidGains g;
        g.kp_pos = kp;
        g.kd_pos = kd;
        g.k_rate = kr;
        const double cost = pid_hover_cost(platform, g, cfg, seed);
        if (cost < best_cost) {
          best_cost = cost;
          best = g;
        }
      }
  return best;
}

}  // namespace omniquad
