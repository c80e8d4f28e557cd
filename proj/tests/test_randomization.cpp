#include <catch2/catch.hpp>

#include "omniquad/dynamics.hpp"
#include "omniquad/randomization.hpp"

using namespace omniquad;

TEST_CASE("sampled parameters respect the regime bounds", "[randomization]") {
  Ranges ranges;
  ranges.validate();
  Rng rng(42);

  struct Tracker {
    double lo = 1e300, hi = -1e300;
    void add(double v) { lo = std::min(lo, v); hi = std::max(hi, v); }
  };
  Tracker mass, arm, kappa, cf, wmax, drag, pct;

  for (int i = 0; i < 100'000; ++i) {
    const QuadParams p = sample_params(rng, ranges, Regime::Train);
    const RangeTable& t = ranges.train;
    REQUIRE(t.mass.contains(p.mass));
    REQUIRE(t.arm_length.contains(p.arm_length));
    REQUIRE(t.kappa.contains(p.kappa));
    REQUIRE(t.motor_constant.contains(p.motor_constant));
    REQUIRE(t.max_motor_speed.contains(p.max_motor_speed));
    for (int k = 0; k < 3; ++k) REQUIRE(t.body_drag.contains(p.body_drag[k]));
    const double pct_of_mass = 100.0 * p.payload_mass / p.mass;
    REQUIRE(pct_of_mass >= t.payload_pct.lo - 1e-9);
    REQUIRE(pct_of_mass <= t.payload_pct.hi + 1e-9);
    REQUIRE(std::abs(p.payload_offset.x()) <= 0.10 * p.arm_length + 1e-12);
    REQUIRE(std::abs(p.payload_offset.y()) <= 0.10 * p.arm_length + 1e-12);

    mass.add(p.mass);
    arm.add(p.arm_length);
    kappa.add(p.kappa);
    cf.add(p.motor_constant);
    wmax.add(p.max_motor_speed);
    drag.add(p.body_drag.x());
    pct.add(pct_of_mass);
  }

  // Empirical extrema approach the bounds within 1% of the range width.
  auto near_bounds = [](const Tracker& tr, const Range& r) {
    const double w = r.hi - r.lo;
    REQUIRE(tr.lo - r.lo < 0.01 * w);
    REQUIRE(r.hi - tr.hi < 0.01 * w);
  };
  near_bounds(mass, ranges.train.mass);
  near_bounds(arm, ranges.train.arm_length);
  near_bounds(kappa, ranges.train.kappa);
  near_bounds(cf, ranges.train.motor_constant);
  near_bounds(wmax, ranges.train.max_motor_speed);
  near_bounds(drag, ranges.train.body_drag);
  near_bounds(pct, ranges.train.payload_pct);
}

TEST_CASE("test regime reaches outside the train ranges", "[randomization]") {
  Ranges ranges;
  Rng rng(7);
  bool outside_train = false;
  for (int i = 0; i < 10'000; ++i) {
    const QuadParams p = sample_params(rng, ranges, Regime::Test);
    REQUIRE(ranges.test.mass.contains(p.mass));
    REQUIRE(ranges.test.max_motor_speed.contains(p.max_motor_speed));
    if (!ranges.train.mass.contains(p.mass)) outside_train = true;
  }
  REQUIRE(outside_train);
}

TEST_CASE("sampled inertia is positive definite and consistent", "[randomization]") {
  Ranges ranges;
  Rng rng(99);
  for (int i = 0; i < 20'000; ++i) {
    const QuadParams p = sample_params(rng, ranges, Regime::Test);
    const double ixx = p.inertia(0, 0), iyy = p.inertia(1, 1), izz = p.inertia(2, 2);
    REQUIRE(ixx > 0.0);
    REQUIRE(iyy > 0.0);
    REQUIRE(izz > 0.0);
    REQUIRE(ixx <= iyy + izz + 1e-18);
    REQUIRE(iyy <= ixx + izz + 1e-18);
    REQUIRE(izz <= ixx + iyy + 1e-18);
    REQUIRE_NOTHROW(p.validate());
  }
}

TEST_CASE("equal seeds give identical platforms", "[randomization]") {
  Ranges ranges;
  const QuadParams a = sample_params(12345, ranges, Regime::Train);
  const QuadParams b = sample_params(12345, ranges, Regime::Train);
  REQUIRE(a.flatten() == b.flatten());
  REQUIRE(a.payload_offset == b.payload_offset);
  const QuadParams c = sample_params(12346, ranges, Regime::Train);
  REQUIRE(a.flatten() != c.flatten());
}

TEST_CASE("flatten and unflatten are a bijection", "[randomization]") {
  Ranges ranges;
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const QuadParams p = sample_params(rng, ranges, Regime::Test);
    const auto e = p.flatten();
    REQUIRE(static_cast<int>(e.size()) == QuadParams::kEnvDim);
    const QuadParams q = QuadParams::unflatten(e, p.payload_offset);
    REQUIRE(q.flatten() == e);
    REQUIRE(q.payload_offset == p.payload_offset);
  }
}

TEST_CASE("mid-episode shift schedule", "[randomization]") {
  Ranges ranges;
  Rng rng(11);
  const QuadParams base = sample_params(rng, ranges, Regime::Train);
  for (int i = 0; i < 5000; ++i) {
    const ShiftSchedule s = schedule_midepisode_shift(rng, ranges, Regime::Train, 5.0, base);
    REQUIRE(s.t_shift >= 0.0);
    REQUIRE(s.t_shift <= 5.0);
    REQUIRE(ranges.train.mass.contains(s.delta.mass));
    const QuadParams shifted = apply_shift(base, s.delta);
    // Only mass, inertia, and the center of mass move.
    REQUIRE(shifted.arm_length == base.arm_length);
    REQUIRE(shifted.motor_constant == base.motor_constant);
    REQUIRE(shifted.kappa == base.kappa);
    REQUIRE(shifted.max_motor_speed == base.max_motor_speed);
    REQUIRE(shifted.body_drag == base.body_drag);
    REQUIRE(shifted.payload_mass == base.payload_mass);
    REQUIRE(shifted.mass == s.delta.mass);
    REQUIRE_NOTHROW(shifted.validate());
  }

  const ShiftSchedule s1 = schedule_midepisode_shift(777, ranges, Regime::Train, 5.0, base);
  const ShiftSchedule s2 = schedule_midepisode_shift(777, ranges, Regime::Train, 5.0, base);
  REQUIRE(s1.t_shift == s2.t_shift);
  REQUIRE(s1.delta.mass == s2.delta.mass);
}

TEST_CASE("environment vector normalization", "[randomization]") {
  Ranges ranges;
  const EnvNormalizer norm(ranges.test);
  Rng rng(55);
  for (int i = 0; i < 2000; ++i) {
    const QuadParams p = sample_params(rng, ranges, Regime::Test);
    const auto en = norm.normalize(p.flatten());
    for (double v : en) {
      REQUIRE(std::abs(v) <= 1.0 + 1e-9);
    }
    // Structurally constant off-diagonal slots normalize to zero.
    for (int slot : {5, 6, 7, 9, 10, 11}) REQUIRE(en[static_cast<std::size_t>(slot)] == 0.0);
  }

  // Two vectors differing only in an off-diagonal slot normalize identically.
  const QuadParams p = sample_params(rng, ranges, Regime::Train);
  auto e1 = p.flatten();
  auto e2 = e1;
  e2[5] += 1e-3;
  REQUIRE(norm.normalize(e1) == norm.normalize(e2));
}

TEST_CASE("nominal platform is flyable", "[randomization]") {
  Ranges ranges;
  for (Regime regime : {Regime::Train, Regime::Test}) {
    const QuadParams p = nominal_params(ranges, regime);
    REQUIRE_NOTHROW(p.validate());
    REQUIRE(hover_motor_speed(p) < p.max_motor_speed);
    const double twr = 4.0 * p.motor_constant * p.max_motor_speed * p.max_motor_speed /
                       ((p.mass + p.payload_mass) * kGravity);
    REQUIRE(twr > 2.0);
  }
}
