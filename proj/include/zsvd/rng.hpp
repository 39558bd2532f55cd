#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace zsvd {

// Deterministic scalar generator. mt19937_64 output is pinned by the
// standard, and the uniform/gaussian mappings below are fixed arithmetic,
// so a seed reproduces the same stream bit-for-bit on every build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1), 53 mantissa bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Uniform in [-1, 1).
  double uniform_pm1() { return 2.0 * uniform() - 1.0; }

  // Unit-variance Box-Muller gaussian.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(6.283185307179586 * u2);
    have_spare_ = true;
    return mag * std::cos(6.283185307179586 * u2);
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Decorrelates substreams (calibration inputs vs. weights vs. fuzzing) that
// share a base seed. SplitMix64 finalizer over base + golden-ratio * salt.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace zsvd
