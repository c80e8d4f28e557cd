#pragma once

#include "omniquad/dynamics.hpp"

namespace omniquad {

// Platform-independent cascade from goal position to (collective thrust,
// body rates). Desired acceleration mimics a spring-mass-damper; body rates
// are proportional to the reduced attitude error. No platform parameter
// enters here, which is what leaves all adaptation to the low-level policy.
struct HighLevelGains {
  double omega_n = 2.0;       // rad/s, natural frequency
  double zeta = 0.7;          // damping ratio
  double attitude_tau = 0.2;  // s, attitude-error time constant
  double c_max = 50.0;        // m/s^2, thrust command saturation
};

inline HighLevelCommand compute_command(const Vec3& position, const Vec3& velocity,
                                        const Mat3& rotation, const Vec3& goal,
                                        const HighLevelGains& g = {}) {
  constexpr double kEps = 1e-6;
  Vec3 a_des = g.omega_n * g.omega_n * (goal - position) - 2.0 * g.zeta * g.omega_n * velocity +
               Vec3(0.0, 0.0, kGravity);
  HighLevelCommand cmd;
  const double a_norm = a_des.norm();
  Vec3 dir;
  if (a_norm < kEps) {
    // Free-fall singularity: command minimal thrust along the current body z.
    cmd.c_des = kEps;
    dir = rotation.col(2);
  } else {
    cmd.c_des = std::min(a_norm, g.c_max);
    dir = a_des / a_norm;
  }
  cmd.omega_des = reduced_attitude_error(rotation, dir) / g.attitude_tau;
  return cmd;
}

}  // namespace omniquad
