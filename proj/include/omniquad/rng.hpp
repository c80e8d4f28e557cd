#pragma once

#include <cmath>
#include <cstdint>

namespace omniquad {

// Counter-free deterministic RNG (xoshiro256++ seeded through splitmix64).
// The standard <random> distributions are implementation-defined, which would
// break the reproducibility contract across toolchains, so all draws are
// implemented here.
class Rng {
 public:
  Rng() : Rng(0) {}

  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  // Derives an independent stream from (seed, tag, index). Streams taken from
  // distinct tags never collide regardless of how often either is advanced.
  static Rng stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
    std::uint64_t x = seed;
    x = splitmix64(x) ^ (tag * 0x9e3779b97f4a7c15ULL);
    x = splitmix64(x) ^ (index * 0xbf58476d1ce4e5b9ULL);
    return Rng(splitmix64(x));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  // Marsaglia polar method; one cached value.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u, v, s;
    do {
      u = uniform(-1.0, 1.0);
      v = uniform(-1.0, 1.0);
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    cached_ = v * m;
    has_cached_ = true;
    return u * m;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_[4];
  double cached_ = 0.0;
  bool has_cached_ = false;
};

// Stream tags used across the project; kept in one place so seed layouts
// never collide between subsystems.
namespace rng_tag {
inline constexpr std::uint64_t kEnv = 1;        // per-environment episode draws
inline constexpr std::uint64_t kPolicyInit = 2; // weight initialization
inline constexpr std::uint64_t kLearner = 3;    // minibatch shuffling
inline constexpr std::uint64_t kEvalEpisode = 4;// paired evaluation episodes
inline constexpr std::uint64_t kAction = 5;     // per-env exploration noise
inline constexpr std::uint64_t kDistill = 6;    // distillation sampling
}  // namespace rng_tag

}  // namespace omniquad
