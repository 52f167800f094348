#pragma once

#include <cmath>
#include <cstdint>

#include "canon3d/common.hpp"

namespace canon3d {

// Deterministic 64-bit generator (splitmix64). Small state, trivially
// seedable, identical across platforms — every random decision in the
// library flows through this so runs are reproducible bit-for-bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  int uniform_int(int n) {  // [0, n)
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Standard normal via Box-Muller; consumes two uniforms per pair.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform01(), u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Current stream position; recorded by reports so a metric run can be
  // reproduced from the value alone.
  std::uint64_t state() const { return state_; }

  // Derives an independent substream; used to decorrelate per-record /
  // per-purpose randomness from one master seed.
  Rng fork(std::uint64_t salt) {
    std::uint64_t s = next_u64();
    return Rng(s ^ (salt * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Uniform direction on the unit sphere (normalized Gaussian triple).
inline Vec3 random_unit_vector(Rng& rng) {
  while (true) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n > 1e-12) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

// Haar-uniform random rotation from a uniform unit quaternion
// (Shoemake's subgroup-algorithm construction).
inline Mat3 random_rotation(Rng& rng) {
  double u1 = rng.uniform01(), u2 = rng.uniform01(), u3 = rng.uniform01();
  double s1 = std::sqrt(1.0 - u1), s2 = std::sqrt(u1);
  double w = s1 * std::sin(2.0 * M_PI * u2);
  double x = s1 * std::cos(2.0 * M_PI * u2);
  double y = s2 * std::sin(2.0 * M_PI * u3);
  double z = s2 * std::cos(2.0 * M_PI * u3);
  Mat3 r;
  r[0] = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)};
  r[1] = {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)};
  r[2] = {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
  return r;
}

}  // namespace canon3d
