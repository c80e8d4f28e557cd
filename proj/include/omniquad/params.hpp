#pragma once

#include <array>
#include <stdexcept>
#include <string>

#include "omniquad/geometry.hpp"

namespace omniquad {

// Physical description of one quadrotor plus its payload. The 18 entries of
// the environment vector e (mass, arm length, kappa, motor constant, inertia
// 9-dim, body drag 3-dim, max motor speed, payload mass) are a fixed-order
// bijection via flatten()/unflatten(); payload_offset is randomized but not
// part of e.
struct QuadParams {
  double mass = 0.546;           // kg, body without payload
  double arm_length = 0.123;     // m, center to rotor
  double kappa = 0.01045;        // m, rotor torque per unit thrust
  double motor_constant = 3.8775e-6;  // N s^2 rad^-2, thrust = c_f * omega^2
  Mat3 inertia = Mat3::Identity() * 2.837e-3;  // kg m^2, about body center
  Vec3 body_drag = Vec3::Constant(0.31);       // 1/s, per-axis specific drag
  double max_motor_speed = 2801.0;  // rad/s
  double payload_mass = 0.0;        // kg, point mass
  Vec3 payload_offset = Vec3::Zero();  // m, payload position from body center

  static constexpr int kEnvDim = 18;

  std::array<double, kEnvDim> flatten() const {
    std::array<double, kEnvDim> e{};
    e[0] = mass;
    e[1] = arm_length;
    e[2] = kappa;
    e[3] = motor_constant;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) e[4 + 3 * r + c] = inertia(r, c);
    e[13] = body_drag.x();
    e[14] = body_drag.y();
    e[15] = body_drag.z();
    e[16] = max_motor_speed;
    e[17] = payload_mass;
    return e;
  }

  static QuadParams unflatten(const std::array<double, kEnvDim>& e, const Vec3& payload_offset = Vec3::Zero()) {
    QuadParams p;
    p.mass = e[0];
    p.arm_length = e[1];
    p.kappa = e[2];
    p.motor_constant = e[3];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p.inertia(r, c) = e[4 + 3 * r + c];
    p.body_drag = Vec3(e[13], e[14], e[15]);
    p.max_motor_speed = e[16];
    p.payload_mass = e[17];
    p.payload_offset = payload_offset;
    return p;
  }

  void validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("QuadParams: " + what); };
    if (!(mass > 0.0)) fail("mass must be > 0");
    if (!(arm_length > 0.0)) fail("arm_length must be > 0");
    if (!(motor_constant > 0.0)) fail("motor_constant must be > 0");
    if (!(max_motor_speed > 0.0)) fail("max_motor_speed must be > 0");
    if (payload_mass < 0.0) fail("payload_mass must be >= 0");
    if ((inertia - inertia.transpose()).cwiseAbs().maxCoeff() > 1e-12) fail("inertia must be symmetric");
    Eigen::SelfAdjointEigenSolver<Mat3> es(inertia);
    if (es.eigenvalues().minCoeff() <= 0.0) fail("inertia must be positive definite");
  }
};

// Mass properties with the payload folded in as a point mass: total mass,
// inertia about the combined center of mass (parallel-axis terms for both the
// body and the payload), and the center-of-mass offset from the body center.
struct EffectiveBody {
  double m_total = 0.0;
  Mat3 inertia = Mat3::Zero();
  Vec3 com_offset = Vec3::Zero();
};

inline EffectiveBody effective_body(const QuadParams& p) {
  EffectiveBody eb;
  eb.m_total = p.mass + p.payload_mass;
  eb.com_offset = p.payload_mass * p.payload_offset / eb.m_total;
  auto point_term = [](double m, const Vec3& d) -> Mat3 {
    return m * (d.squaredNorm() * Mat3::Identity() - d * d.transpose());
  };
  eb.inertia = p.inertia + point_term(p.mass, -eb.com_offset) +
               point_term(p.payload_mass, p.payload_offset - eb.com_offset);
  return eb;
}

// Patch of parameters re-drawn by a mid-episode shift: mass, inertia, and the
// center of mass (payload offset as its proxy). Everything else is untouched.
struct ParamShift {
  double mass = 0.0;
  Mat3 inertia = Mat3::Zero();
  Vec3 payload_offset = Vec3::Zero();
};

inline QuadParams apply_shift(const QuadParams& base, const ParamShift& shift) {
  QuadParams p = base;
  p.mass = shift.mass;
  p.inertia = shift.inertia;
  p.payload_offset = shift.payload_offset;
  return p;
}

}  // namespace omniquad
