#pragma once

#include "omniquad/env.hpp"

namespace omniquad {

struct L1ControllerFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Simplified L1 adaptive augmentation of an inversion controller on a fixed
// nominal model (median of the test ranges). A state predictor for velocity
// and body rates runs the nominal dynamics plus the disturbance estimate; the
// prediction error drives a piecewise-constant adaptation law whose estimate
// is exact in one step for a constant disturbance; the low-pass filtered
// estimate is subtracted from the commanded acceleration and angular
// acceleration. With adaptation off this degenerates to the pure nominal
// inversion controller.
struct L1Gains {
  double a_v = 20.0;       // 1/s, predictor error feedback (velocity loop)
  double a_omega = 40.0;   // 1/s, predictor error feedback (rate loop)
  double cutoff_hz = 10.0; // low-pass cutoff on the disturbance estimate
  double k_rate = 25.0;    // 1/s, rate P gain of the nominal controller
};

using Vec6 = Eigen::Matrix<double, 6, 1>;

struct L1State {
  Vec3 v_hat = Vec3::Zero();
  Vec3 omega_hat = Vec3::Zero();
  Vec4 motor_est = Vec4::Zero();   // predictor's own first-order motor state
  Vec3 err_v = Vec3::Zero();       // prediction errors at the last update
  Vec3 err_omega = Vec3::Zero();
  Vec6 sigma = Vec6::Zero();       // [specific force 3; angular accel 3]
  Vec6 sigma_filt = Vec6::Zero();
  bool initialized = false;
  bool adaptation_on = true;
};

struct L1Debug {
  Vec3 sigma_force = Vec3::Zero();   // raw estimate, m/s^2
  Vec3 sigma_alpha = Vec3::Zero();   // raw estimate, rad/s^2
};

// One control step: measured kinematic state in, motor commands out, state
// advanced. The filter time constant is 1/(2*pi*cutoff).
inline Vec4 l1_step(L1State& l1, const StateSnapshot& measured, const Vec3& goal,
                    const QuadParams& nominal, const HighLevelGains& hl, const L1Gains& gains,
                    double motor_tau, double dt, L1Debug* debug = nullptr) {
  const EffectiveBody eff = effective_body(nominal);
  const Mat3 inertia_inv = eff.inertia.inverse();

  if (!l1.initialized) {
    l1.v_hat = measured.velocity;
    l1.omega_hat = measured.angular_velocity;
    l1.motor_est = Vec4::Constant(std::min(hover_motor_speed(nominal), nominal.max_motor_speed));
    l1.err_v.setZero();
    l1.err_omega.setZero();
    l1.initialized = true;
  }

  // Piecewise-constant adaptation: the predictor error obeys
  //   e_next = (1 - a dt) e + dt (sigma_hat - sigma_true + model_err),
  // so subtracting the inverted propagation recovers sigma_true exactly in
  // one step for a constant disturbance.
  const Vec3 new_err_v = l1.v_hat - measured.velocity;
  const Vec3 new_err_omega = l1.omega_hat - measured.angular_velocity;
  if (l1.adaptation_on) {
    l1.sigma.head<3>() -= (new_err_v - (1.0 - gains.a_v * dt) * l1.err_v) / dt;
    l1.sigma.tail<3>() -= (new_err_omega - (1.0 - gains.a_omega * dt) * l1.err_omega) / dt;
    const double alpha = std::exp(-2.0 * M_PI * gains.cutoff_hz * dt);
    l1.sigma_filt = alpha * l1.sigma_filt + (1.0 - alpha) * l1.sigma;
  } else {
    l1.sigma.setZero();
    l1.sigma_filt.setZero();
  }
  l1.err_v = new_err_v;
  l1.err_omega = new_err_omega;
  if (!l1.sigma.allFinite() || !l1.sigma_filt.allFinite())
    throw L1ControllerFault("l1: non-finite disturbance estimate");
  if (debug) {
    debug->sigma_force = l1.sigma.head<3>();
    debug->sigma_alpha = l1.sigma.tail<3>();
  }

  // Nominal inversion control with the filtered estimate subtracted from the
  // commanded accelerations.
  Vec3 a_des = hl.omega_n * hl.omega_n * (goal - measured.position) -
               2.0 * hl.zeta * hl.omega_n * measured.velocity + Vec3(0.0, 0.0, kGravity) -
               l1.sigma_filt.head<3>();
  const double a_norm = a_des.norm();
  Vec3 dir;
  double c_des;
  if (a_norm < 1e-6) {
    c_des = 1e-6;
    dir = measured.rotation.col(2);
  } else {
    c_des = std::min(a_norm, hl.c_max);
    dir = a_des / a_norm;
  }
  const Vec3 omega_des = reduced_attitude_error(measured.rotation, dir) / hl.attitude_tau;

  const double thrust = std::max(eff.m_total * c_des, 0.0);
  const Vec3 omega = measured.angular_velocity;
  const Vec3 torque =
      eff.inertia * (gains.k_rate * (omega_des - omega) - l1.sigma_filt.tail<3>()) +
      omega.cross(eff.inertia * omega);
  const Vec4 motor_cmd = allocate_motor_speeds(thrust, torque, nominal, eff.com_offset);

  // Predictor propagation with the applied command, the raw estimate, and
  // error feedback. The predictor carries its own nominal motor lag and
  // derives thrust and torque from it through the same mixer geometry.
  const Vec4 cmd_clamped = motor_cmd.cwiseMax(0.0).cwiseMin(nominal.max_motor_speed);
  const BodyWrench wrench_est = body_wrench(l1.motor_est, nominal, eff, std::nullopt);
  const Vec3 drag_accel = -measured.rotation *
                          (nominal.body_drag.asDiagonal() *
                           (measured.rotation.transpose() * measured.velocity));
  const Vec3 v_dot = Vec3(0.0, 0.0, -kGravity) +
                     measured.rotation * wrench_est.force_body / eff.m_total + drag_accel +
                     l1.sigma.head<3>() - gains.a_v * new_err_v;
  const Vec3 omega_dot =
      inertia_inv * (wrench_est.torque_body - omega.cross(eff.inertia * omega)) +
      l1.sigma.tail<3>() - gains.a_omega * new_err_omega;
  l1.v_hat += dt * v_dot;
  l1.omega_hat += dt * omega_dot;
  l1.motor_est += dt * (cmd_clamped - l1.motor_est) / motor_tau;

  return motor_cmd;
}

}  // namespace omniquad
