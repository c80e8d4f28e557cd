#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "omniquad/params.hpp"

namespace omniquad {

struct SimFault : std::runtime_error {
  explicit SimFault(const std::string& field)
      : std::runtime_error("simulation fault: non-finite " + field), field_name(field) {}
  std::string field_name;
};

struct SimConfig {
  double dt = 0.002;          // s, physics and control step (500 Hz)
  double latency = 0.010;     // s, observation latency
  double motor_tau = 0.033;   // s, first-order motor time constant
  double crash_height = 0.02; // m, early-termination floor
  double episode_time = 5.0;  // s

  int latency_depth() const { return static_cast<int>(std::lround(latency / dt)); }
};

enum class DisturbanceKind { ExternalForce, MotorEfficiencyLoss, ParamShift };

struct Disturbance {
  DisturbanceKind kind = DisturbanceKind::ExternalForce;
  Vec3 force = Vec3::Zero();   // N, world frame, applied at the center of mass
  int motor_index = 0;         // 0..3
  double efficiency = 1.0;     // in [0, 1], thrust multiplier on motor_index
  ParamShift param_delta;      // used by ParamShift only; applied by the owner
  bool active = false;
};

// Kinematic snapshot kept in the latency FIFO. z_accel is the body-frame z
// specific force at snapshot time (what the IMU reports, delayed like the
// rest of the sensor stream).
struct StateSnapshot {
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();
  Vec3 angular_velocity = Vec3::Zero();
  double z_accel = kGravity;
  double time = 0.0;
};

struct SimState {
  Vec3 position = Vec3::Zero();       // m, world
  Vec3 velocity = Vec3::Zero();       // m/s, world
  Mat3 rotation = Mat3::Identity();   // body to world
  Vec3 angular_velocity = Vec3::Zero();  // rad/s, body
  Vec4 motor_speeds = Vec4::Zero();   // rad/s
  Vec4 motor_commands = Vec4::Zero(); // rad/s, last command given to step()
  double sim_time = 0.0;
  std::vector<StateSnapshot> latency_buffer;  // oldest first, fixed depth
  std::optional<Disturbance> active_disturbance;

  StateSnapshot snapshot() const {
    return {position, velocity, rotation, angular_velocity, kGravity, sim_time};
  }

  // Oldest buffered snapshot: exactly `latency` old once the sim has run that
  // long, the spawn state before that.
  const StateSnapshot& delayed() const { return latency_buffer.front(); }
};

inline SimState make_initial_state(const SimConfig& cfg, const Vec3& position, const Vec3& velocity,
                                   const Mat3& rotation, const Vec3& angular_velocity) {
  SimState s;
  s.position = position;
  s.velocity = velocity;
  s.rotation = rotation;
  s.angular_velocity = angular_velocity;
  s.latency_buffer.assign(static_cast<std::size_t>(cfg.latency_depth()), s.snapshot());
  return s;
}

// X configuration: rotors at +-45 degrees, moment arm arm_length/sqrt(2) per
// axis, alternating spin directions. Motor i spin s_i = +1 means CCW seen
// from above; rotor drag applies -s_i * kappa * f_i about body z.
inline Vec3 rotor_position(const QuadParams& p, int i) {
  const double a = p.arm_length / std::sqrt(2.0);
  static constexpr double sx[4] = {+1.0, -1.0, -1.0, +1.0};
  static constexpr double sy[4] = {+1.0, +1.0, -1.0, -1.0};
  return Vec3(sx[i] * a, sy[i] * a, 0.0);
}

inline double rotor_spin_dir(int i) { return (i % 2 == 0) ? +1.0 : -1.0; }

struct BodyWrench {
  Vec4 rotor_thrust = Vec4::Zero();  // N, per rotor (after efficiency loss)
  Vec3 force_body = Vec3::Zero();    // N, thrust only
  Vec3 torque_body = Vec3::Zero();   // N m, about the effective center of mass
};

inline BodyWrench body_wrench(const Vec4& motor_speeds, const QuadParams& params,
                              const EffectiveBody& eff,
                              const std::optional<Disturbance>& disturbance) {
  BodyWrench w;
  for (int i = 0; i < 4; ++i) {
    double f = params.motor_constant * motor_speeds[i] * motor_speeds[i];
    if (disturbance && disturbance->active &&
        disturbance->kind == DisturbanceKind::MotorEfficiencyLoss &&
        disturbance->motor_index == i) {
      f *= disturbance->efficiency;
    }
    w.rotor_thrust[i] = f;
    const Vec3 arm = rotor_position(params, i) - eff.com_offset;
    w.force_body.z() += f;
    w.torque_body += arm.cross(Vec3(0.0, 0.0, f));
    w.torque_body.z() += -rotor_spin_dir(i) * params.kappa * f;
  }
  return w;
}

// Translational acceleration (world frame) and angular acceleration (body
// frame) at the given kinematic state. Drag acts at the center of mass as a
// specific force -diag(body_drag) * v_body.
struct Derivatives {
  Vec3 accel = Vec3::Zero();
  Vec3 ang_accel = Vec3::Zero();
};

inline Derivatives compute_derivatives(const Vec3& velocity, const Mat3& rotation,
                                       const Vec3& angular_velocity, const Vec4& motor_speeds,
                                       const QuadParams& params, const EffectiveBody& eff,
                                       const Mat3& inertia_inv,
                                       const std::optional<Disturbance>& disturbance) {
  const BodyWrench w = body_wrench(motor_speeds, params, eff, disturbance);
  Derivatives d;
  d.accel = Vec3(0.0, 0.0, -kGravity) + rotation * w.force_body / eff.m_total -
            rotation * (params.body_drag.asDiagonal() * (rotation.transpose() * velocity));
  if (disturbance && disturbance->active && disturbance->kind == DisturbanceKind::ExternalForce) {
    d.accel += disturbance->force / eff.m_total;
  }
  const Vec3 iw = eff.inertia * angular_velocity;
  d.ang_accel = inertia_inv * (w.torque_body - angular_velocity.cross(iw));
  return d;
}

// Body-frame z specific force (thrust, drag and external force, everything an
// accelerometer sees); equals the mass-normalized thrust c and equals g in
// level hover.
inline double measured_z_accel(const SimState& s, const QuadParams& params) {
  const EffectiveBody eff = effective_body(params);
  const Mat3 inertia_inv = eff.inertia.inverse();
  const Derivatives d = compute_derivatives(s.velocity, s.rotation, s.angular_velocity,
                                            s.motor_speeds, params, eff, inertia_inv,
                                            s.active_disturbance);
  const Vec3 specific_force = d.accel - Vec3(0.0, 0.0, -kGravity);
  return (s.rotation.transpose() * specific_force).z();
}

namespace detail {

struct RkState {
  Vec3 p, v, sigma, omega;
  Vec4 motor;
};

struct RkDeriv {
  Vec3 dp, dv, dsigma, domega;
  Vec4 dmotor;
};

inline RkState rk_add(const RkState& a, const RkDeriv& d, double h) {
  return {a.p + h * d.dp, a.v + h * d.dv, a.sigma + h * d.dsigma,
          a.omega + h * d.domega, a.motor + h * d.dmotor};
}

}  // namespace detail

inline void check_finite(const SimState& s) {
  if (!s.position.allFinite()) throw SimFault("position");
  if (!s.velocity.allFinite()) throw SimFault("velocity");
  if (!s.rotation.allFinite()) throw SimFault("rotation");
  if (!s.angular_velocity.allFinite()) throw SimFault("angular_velocity");
  if (!s.motor_speeds.allFinite()) throw SimFault("motor_speeds");
}

// One explicit RK4 step of the full rigid body + first-order motors, rotation
// integrated on the exponential chart about the step's initial attitude and
// re-orthonormalized at the end. Advances the latency FIFO.
inline SimState step(const SimState& state, const QuadParams& params, const Vec4& motor_cmd,
                     double dt, const SimConfig& cfg = {}) {
  if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be > 0");
  if (!motor_cmd.allFinite()) throw SimFault("motor_commands");

  const EffectiveBody eff = effective_body(params);
  const Mat3 inertia_inv = eff.inertia.inverse();
  const Vec4 cmd = motor_cmd.cwiseMax(0.0).cwiseMin(params.max_motor_speed);

  const Mat3 r0 = state.rotation;
  auto deriv = [&](const detail::RkState& y) {
    detail::RkDeriv d;
    const Mat3 r = r0 * exp_so3(y.sigma);
    const Derivatives dyn = compute_derivatives(y.v, r, y.omega, y.motor, params, eff,
                                                inertia_inv, state.active_disturbance);
    d.dp = y.v;
    d.dv = dyn.accel;
    d.dsigma = dexpinv_so3(y.sigma, y.omega);
    d.domega = dyn.ang_accel;
    d.dmotor = (cmd - y.motor) / cfg.motor_tau;
    return d;
  };

  const detail::RkState y0{state.position, state.velocity, Vec3::Zero(),
                           state.angular_velocity, state.motor_speeds};
  const detail::RkDeriv k1 = deriv(y0);
  const detail::RkDeriv k2 = deriv(detail::rk_add(y0, k1, 0.5 * dt));
  const detail::RkDeriv k3 = deriv(detail::rk_add(y0, k2, 0.5 * dt));
  const detail::RkDeriv k4 = deriv(detail::rk_add(y0, k3, dt));

  SimState next = state;
  next.position = y0.p + dt / 6.0 * (k1.dp + 2.0 * k2.dp + 2.0 * k3.dp + k4.dp);
  next.velocity = y0.v + dt / 6.0 * (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv);
  const Vec3 sigma = dt / 6.0 * (k1.dsigma + 2.0 * k2.dsigma + 2.0 * k3.dsigma + k4.dsigma);
  next.rotation = orthonormalize(r0 * exp_so3(sigma));
  next.angular_velocity =
      y0.omega + dt / 6.0 * (k1.domega + 2.0 * k2.domega + 2.0 * k3.domega + k4.domega);
  next.motor_speeds = (y0.motor + dt / 6.0 * (k1.dmotor + 2.0 * k2.dmotor + 2.0 * k3.dmotor + k4.dmotor))
                          .cwiseMax(0.0)
                          .cwiseMin(params.max_motor_speed);
  next.motor_commands = cmd;
  next.sim_time = state.sim_time + dt;

  if (!next.latency_buffer.empty()) {
    StateSnapshot snap = state.snapshot();
    snap.z_accel = (r0.transpose() * (k1.dv - Vec3(0.0, 0.0, -kGravity))).z();
    next.latency_buffer.erase(next.latency_buffer.begin());
    next.latency_buffer.push_back(snap);
  }

  check_finite(next);
  return next;
}

// Re-fills the latency FIFO with the current state, including its measured
// specific force; used after a reset mutates the freshly built state.
inline void refill_latency_buffer(SimState& s, const QuadParams& params) {
  StateSnapshot snap = s.snapshot();
  snap.z_accel = measured_z_accel(s, params);
  for (auto& entry : s.latency_buffer) entry = snap;
}

struct HighLevelCommand {
  double c_des = kGravity;        // m/s^2, mass-normalized collective thrust
  Vec3 omega_des = Vec3::Zero();  // rad/s, body rates
};

inline constexpr int kObservationDim = 23;
using Observation = Eigen::Matrix<double, kObservationDim, 1>;

// Policy input: [R row-major 9 | omega 3 | v 3 | c_des 1 | omega_des 3 |
// prev_action 4], kinematics taken from the latency FIFO.
inline Observation observe(const SimState& state, const HighLevelCommand& cmd,
                           const Vec4& prev_action) {
  const StateSnapshot& snap = state.delayed();
  Observation x;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) x[3 * r + c] = snap.rotation(r, c);
  x.segment<3>(9) = snap.angular_velocity;
  x.segment<3>(12) = snap.velocity;
  x[15] = cmd.c_des;
  x.segment<3>(16) = cmd.omega_des;
  x.segment<4>(19) = prev_action;
  return x;
}

struct RewardTerms {
  double ang_vel_tracking = 0.0;  // -0.01 * |omega - omega_des|
  double z_accel_tracking = 0.0;  // -0.02 * |c - c_des|
  double smoothness = 0.0;        // -0.0002 * |m_t - m_{t-1}|
  double survive = 0.0;           // +dt
  double total = 0.0;
};

inline RewardTerms reward(const SimState& state, const QuadParams& params,
                          const HighLevelCommand& cmd, const Vec4& motor_cmd,
                          const Vec4& prev_motor_cmd, double dt) {
  RewardTerms r;
  r.ang_vel_tracking = -0.01 * (state.angular_velocity - cmd.omega_des).norm();
  r.z_accel_tracking = -0.02 * std::abs(measured_z_accel(state, params) - cmd.c_des);
  r.smoothness = -0.0002 * (motor_cmd - prev_motor_cmd).norm();
  r.survive = dt;
  r.total = r.ang_vel_tracking + r.z_accel_tracking + r.smoothness + r.survive;
  return r;
}

enum class Termination { Running, Crashed, TimeUp };

inline Termination is_terminated(const SimState& state, double episode_time,
                                 const SimConfig& cfg = {}) {
  if (state.position.z() < cfg.crash_height) return Termination::Crashed;
  if (episode_time >= cfg.episode_time) return Termination::TimeUp;
  return Termination::Running;
}

// Motor speed that exactly balances gravity with level attitude and centered
// payload.
inline double hover_motor_speed(const QuadParams& params) {
  const double m_total = params.mass + params.payload_mass;
  return std::sqrt(m_total * kGravity / (4.0 * params.motor_constant));
}

// Inverse of the mixer: per-rotor thrusts realizing a desired collective
// thrust (N) and body torque (N m about the center of mass given by
// com_offset), converted to motor speeds and clamped at the actuator.
inline Vec4 allocate_motor_speeds(double thrust, const Vec3& torque, const QuadParams& params,
                                  const Vec3& com_offset = Vec3::Zero()) {
  Eigen::Matrix4d mix;
  for (int i = 0; i < 4; ++i) {
    const Vec3 arm = rotor_position(params, i) - com_offset;
    mix(0, i) = 1.0;
    mix(1, i) = arm.y();   // roll torque per unit thrust
    mix(2, i) = -arm.x();  // pitch
    mix(3, i) = -rotor_spin_dir(i) * params.kappa;
  }
  const Vec4 f = mix.partialPivLu().solve(Vec4(thrust, torque.x(), torque.y(), torque.z()));
  Vec4 w;
  for (int i = 0; i < 4; ++i)
    w[i] = std::min(std::sqrt(std::max(f[i], 0.0) / params.motor_constant),
                    params.max_motor_speed);
  return w;
}

}  // namespace omniquad
