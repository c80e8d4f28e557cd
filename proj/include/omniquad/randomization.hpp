#pragma once

#include <algorithm>
#include <array>
#include <stdexcept>

#include "omniquad/params.hpp"
#include "omniquad/rng.hpp"

namespace omniquad {

enum class Regime { Train, Test };

struct Range {
  double lo = 0.0;
  double hi = 1.0;
  double sample(Rng& rng) const { return rng.uniform(lo, hi); }
  double mid() const { return 0.5 * (lo + hi); }
  double half_width() const { return 0.5 * (hi - lo); }
  bool contains(double v) const { return v >= lo && v <= hi; }
};

// One regime's row set of the drone/environment parameter table.
struct RangeTable {
  Range mass{0.142, 0.950};             // kg
  Range arm_length{0.046, 0.200};       // m
  Range inertia_xy{7.42e-5, 5.60e-3};   // kg m^2
  Range inertia_z{1.20e-4, 8.80e-3};    // kg m^2
  Range kappa{0.0041, 0.0168};          // m
  Range payload_pct{10.0, 50.0};        // % of mass
  Range payload_loc_pct{-10.0, 10.0};   // % of arm length, per horizontal axis
  Range motor_constant{1.15e-7, 7.64e-6};
  Range body_drag{0.0, 0.62};
  Range max_motor_speed{707.0, 4895.0};  // rad/s
};

inline RangeTable default_test_ranges() {
  RangeTable t;
  t.mass = {0.114, 1.140};
  t.arm_length = {0.037, 0.240};
  t.inertia_xy = {5.94e-5, 6.72e-3};
  t.inertia_z = {9.60e-5, 1.06e-2};
  t.kappa = {0.0033, 0.0201};
  t.payload_pct = {5.0, 60.0};
  t.payload_loc_pct = {-10.0, 10.0};
  t.motor_constant = {9.16e-8, 9.17e-6};
  t.body_drag = {0.0, 0.74};
  t.max_motor_speed = {566.0, 5874.0};
  return t;
}

// Vertical payload offset is not specified by the table rows (they give only
// the in-plane location); a small constant below the frame is used.
inline constexpr double kPayloadZOffset = -0.02;  // m

struct Ranges {
  RangeTable train;
  RangeTable test = default_test_ranges();

  const RangeTable& regime(Regime r) const { return r == Regime::Train ? train : test; }

  void validate() const {
    auto check_row = [](const Range& tr, const Range& te, const char* name) {
      if (!(tr.lo < tr.hi) || !(te.lo < te.hi))
        throw std::invalid_argument(std::string("range table: ") + name + " lo must be < hi");
      if (tr.lo < te.lo || tr.hi > te.hi)
        throw std::invalid_argument(std::string("range table: train ") + name +
                                    " must lie inside the test range");
    };
    check_row(train.mass, test.mass, "mass");
    check_row(train.arm_length, test.arm_length, "arm_length");
    check_row(train.inertia_xy, test.inertia_xy, "inertia_xy");
    check_row(train.inertia_z, test.inertia_z, "inertia_z");
    check_row(train.kappa, test.kappa, "kappa");
    check_row(train.payload_pct, test.payload_pct, "payload_pct");
    check_row(train.payload_loc_pct, test.payload_loc_pct, "payload_loc_pct");
    check_row(train.motor_constant, test.motor_constant, "motor_constant");
    check_row(train.body_drag, test.body_drag, "body_drag");
    check_row(train.max_motor_speed, test.max_motor_speed, "max_motor_speed");
  }
};

// Principal moments of a rigid body satisfy the triangle inequality; clamp the
// independently drawn diagonal down to the nearest consistent triple.
inline void clamp_principal_moments(double& ixx, double& iyy, double& izz) {
  izz = std::min(izz, ixx + iyy);
  ixx = std::min(ixx, iyy + izz);
  iyy = std::min(iyy, ixx + izz);
}

// Draws a full platform from the given regime. Draw order is fixed and part
// of the reproducibility contract.
inline QuadParams sample_params(Rng& rng, const Ranges& ranges, Regime regime) {
  const RangeTable& t = ranges.regime(regime);
  QuadParams p;
  p.mass = t.mass.sample(rng);
  p.arm_length = t.arm_length.sample(rng);
  p.kappa = t.kappa.sample(rng);
  p.motor_constant = t.motor_constant.sample(rng);
  double ixx = t.inertia_xy.sample(rng);
  double iyy = t.inertia_xy.sample(rng);
  double izz = t.inertia_z.sample(rng);
  clamp_principal_moments(ixx, iyy, izz);
  p.inertia = Vec3(ixx, iyy, izz).asDiagonal();
  p.body_drag = Vec3(t.body_drag.sample(rng), t.body_drag.sample(rng), t.body_drag.sample(rng));
  p.max_motor_speed = t.max_motor_speed.sample(rng);
  p.payload_mass = 0.01 * t.payload_pct.sample(rng) * p.mass;
  p.payload_offset =
      Vec3(0.01 * t.payload_loc_pct.sample(rng) * p.arm_length,
           0.01 * t.payload_loc_pct.sample(rng) * p.arm_length, kPayloadZOffset);
  return p;
}

inline QuadParams sample_params(std::uint64_t rng_seed, const Ranges& ranges, Regime regime) {
  Rng rng(rng_seed);
  return sample_params(rng, ranges, regime);
}

// Median platform of a regime (the L1 reference model and the smoke-test
// platform). Payload sits at the body center so the inertia table value is
// also the effective inertia.
inline QuadParams nominal_params(const Ranges& ranges, Regime regime) {
  const RangeTable& t = ranges.regime(regime);
  QuadParams p;
  p.mass = t.mass.mid();
  p.arm_length = t.arm_length.mid();
  p.kappa = t.kappa.mid();
  p.motor_constant = t.motor_constant.mid();
  double ixx = t.inertia_xy.mid(), iyy = t.inertia_xy.mid(), izz = t.inertia_z.mid();
  clamp_principal_moments(ixx, iyy, izz);
  p.inertia = Vec3(ixx, iyy, izz).asDiagonal();
  p.body_drag = Vec3::Constant(t.body_drag.mid());
  p.max_motor_speed = t.max_motor_speed.mid();
  p.payload_mass = 0.01 * t.payload_pct.mid() * p.mass;
  p.payload_offset = Vec3::Zero();
  return p;
}

struct ShiftSchedule {
  double t_shift = 0.0;  // s from episode start
  ParamShift delta;
};

// Mid-episode re-draw of mass, inertia, and center of mass at a uniformly
// sampled time; mimics a sudden payload/wind-style change in the body.
inline ShiftSchedule schedule_midepisode_shift(Rng& rng, const Ranges& ranges, Regime regime,
                                               double episode_len, const QuadParams& base) {
  const RangeTable& t = ranges.regime(regime);
  ShiftSchedule s;
  s.t_shift = rng.uniform(0.0, episode_len);
  s.delta.mass = t.mass.sample(rng);
  double ixx = t.inertia_xy.sample(rng);
  double iyy = t.inertia_xy.sample(rng);
  double izz = t.inertia_z.sample(rng);
  clamp_principal_moments(ixx, iyy, izz);
  s.delta.inertia = Vec3(ixx, iyy, izz).asDiagonal();
  s.delta.payload_offset =
      Vec3(0.01 * t.payload_loc_pct.sample(rng) * base.arm_length,
           0.01 * t.payload_loc_pct.sample(rng) * base.arm_length, kPayloadZOffset);
  return s;
}

inline ShiftSchedule schedule_midepisode_shift(std::uint64_t rng_seed, const Ranges& ranges,
                                               Regime regime, double episode_len,
                                               const QuadParams& base) {
  Rng rng(rng_seed);
  return schedule_midepisode_shift(rng, ranges, regime, episode_len, base);
}

// Per-slot normalization of the environment vector to [-1, 1] by the test
// ranges. Slots that are structurally constant (the off-diagonal inertia
// entries) normalize to zero so they carry no signal.
class EnvNormalizer {
 public:
  explicit EnvNormalizer(const RangeTable& test) {
    set_slot(0, test.mass);
    set_slot(1, test.arm_length);
    set_slot(2, test.kappa);
    set_slot(3, test.motor_constant);
    for (int i = 4; i <= 12; ++i) { mid_[i] = 0.0; half_[i] = 0.0; }
    set_slot(4, test.inertia_xy);
    set_slot(8, test.inertia_xy);
    set_slot(12, test.inertia_z);
    for (int i = 13; i <= 15; ++i) set_slot(i, test.body_drag);
    set_slot(16, test.max_motor_speed);
    // Payload mass in kg spans pct/100 * mass over both rows.
    mid_[17] = 0.5 * (0.01 * test.payload_pct.lo * test.mass.lo +
                      0.01 * test.payload_pct.hi * test.mass.hi);
    half_[17] = 0.5 * (0.01 * test.payload_pct.hi * test.mass.hi -
                       0.01 * test.payload_pct.lo * test.mass.lo);
  }

  std::array<double, QuadParams::kEnvDim> normalize(const std::array<double, QuadParams::kEnvDim>& e) const {
    std::array<double, QuadParams::kEnvDim> out{};
    for (int i = 0; i < QuadParams::kEnvDim; ++i)
      out[i] = half_[i] > 0.0 ? (e[i] - mid_[i]) / half_[i] : 0.0;
    return out;
  }

 private:
  void set_slot(int i, const Range& r) {
    mid_[i] = r.mid();
    half_[i] = r.half_width();
  }
  std::array<double, QuadParams::kEnvDim> mid_{};
  std::array<double, QuadParams::kEnvDim> half_{};
};

}  // namespace omniquad
