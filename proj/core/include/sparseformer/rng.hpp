#pragma once

#include <cmath>
#include <cstdint>

namespace spf {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  return splitmix64(a ^ splitmix64(b ^ splitmix64(c)));
}

// Deterministic stream over splitmix64. Streams seeded per (seed, step, sample)
// keep draws independent of thread scheduling.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  // Unbiased integer in [0, n) via 128-bit multiply.
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double next_normal() {
    // Box-Muller; u1 kept away from zero so log() stays finite.
    double u1 = 1.0 - next_uniform();
    double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Normal(0, stddev) with rejection beyond clip_sigmas standard deviations.
  double next_trunc_normal(double stddev, double clip_sigmas = 2.0) {
    double z = next_normal();
    while (std::fabs(z) > clip_sigmas) z = next_normal();
    return z * stddev;
  }

 private:
  std::uint64_t state_;
};

}  // namespace spf
