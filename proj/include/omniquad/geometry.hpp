#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "omniquad/rng.hpp"

namespace omniquad {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kGravity = 9.81;  // m/s^2, z-up world frame

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
      -w.y(), w.x(), 0.0;
  return m;
}

inline Vec3 vee(const Mat3& m) { return Vec3(m(2, 1), m(0, 2), m(1, 0)); }

// Rodrigues formula, exact for any rotation vector.
inline Mat3 exp_so3(const Vec3& w) {
  const double theta = w.norm();
  if (theta < 1e-12) {
    const Mat3 k = hat(w);
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const Mat3 k = hat(w / theta);
  return Mat3::Identity() + std::sin(theta) * k + (1.0 - std::cos(theta)) * k * k;
}

// Inverse right-trivialized tangent of exp on SO(3): sigma_dot = dexpinv(sigma, omega).
// Needed so the RK4 stages integrate the rotation chart at full order.
inline Vec3 dexpinv_so3(const Vec3& sigma, const Vec3& omega) {
  const double theta = sigma.norm();
  const Vec3 half_cross = 0.5 * sigma.cross(omega);
  if (theta < 1e-8) {
    return omega - half_cross + sigma.cross(sigma.cross(omega)) / 12.0;
  }
  const double c = (1.0 - 0.5 * theta / std::tan(0.5 * theta)) / (theta * theta);
  return omega - half_cross + c * sigma.cross(sigma.cross(omega));
}

// One Newton step of the polar projection; keeps R^T R = I at 1e-9 over long runs.
inline Mat3 orthonormalize(const Mat3& r) {
  return r * (1.5 * Mat3::Identity() - 0.5 * (r.transpose() * r));
}

// Rotation angle between the body z-axis of `rotation` and direction `dir`
// (unit), returned as a body-frame rotation vector with zero z-component.
inline Vec3 reduced_attitude_error(const Mat3& rotation, const Vec3& dir) {
  const Vec3 z_body = rotation.col(2);
  const double cos_angle = std::clamp(z_body.dot(dir), -1.0, 1.0);
  const double angle = std::acos(cos_angle);
  Vec3 axis_world = z_body.cross(dir);
  const double axis_norm = axis_world.norm();
  if (axis_norm < 1e-12) {
    if (cos_angle > 0.0) return Vec3::Zero();
    // Antiparallel: any axis in the horizontal body plane works; pick body x.
    Vec3 e = rotation.transpose() * Vec3::UnitX() * angle;
    e.z() = 0.0;
    return e.normalized() * angle;
  }
  Vec3 e = rotation.transpose() * (axis_world / axis_norm) * angle;
  e.z() = 0.0;  // reduced attitude never commands yaw
  return e;
}

// Uniform random rotation (Shoemake quaternion method).
inline Mat3 random_rotation(Rng& rng) {
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double t2 = 2.0 * M_PI * u2, t3 = 2.0 * M_PI * u3;
  Eigen::Quaterniond q(a * std::sin(t2), a * std::cos(t2), b * std::sin(t3), b * std::cos(t3));
  return q.toRotationMatrix();
}

// Random rotation with tilt (angle between body z and world z) capped at
// max_tilt radians; max_tilt >= pi degenerates to the uniform draw.
inline Mat3 random_rotation_tilt_limited(Rng& rng, double max_tilt) {
  if (max_tilt >= M_PI) return random_rotation(rng);
  // Tilt axis uniform in the horizontal plane, tilt angle uniform in cos.
  const double yaw = rng.uniform(0.0, 2.0 * M_PI);
  const double cos_min = std::cos(max_tilt);
  const double cos_tilt = rng.uniform(cos_min, 1.0);
  const double tilt = std::acos(cos_tilt);
  const double axis_angle = rng.uniform(0.0, 2.0 * M_PI);
  const Vec3 axis(std::cos(axis_angle), std::sin(axis_angle), 0.0);
  return exp_so3(Vec3(0.0, 0.0, yaw)) * exp_so3(axis * tilt);
}

}  // namespace omniquad
