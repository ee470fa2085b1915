#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "crpsrft/errors.hpp"

namespace crpsrft {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Mixes a base seed with up to three stream ids into one 64-bit seed.
/// Used to derive independent, order-free streams keyed by e.g.
/// (seed, trajectory) or (seed, member, step).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a = 0,
                              std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t s = seed;
  std::uint64_t out = splitmix64(s);
  s ^= a + 0x243f6a8885a308d3ull;
  out ^= splitmix64(s);
  s ^= b + 0x13198a2e03707344ull;
  out ^= splitmix64(s);
  s ^= c + 0xa4093822299f31d0ull;
  out ^= splitmix64(s);
  return out;
}

/// Seeded random stream with platform-stable output.
///
/// std::mt19937_64 is bit-exact by standard; the distributions are not, so
/// uniform/normal conversion is done here. Streams derived from the same
/// (seed, ids...) always produce the same sequence on any platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t a = 0,
                     std::uint64_t b = 0, std::uint64_t c = 0)
      : eng_(mix_seed(seed, a, b, c)) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; caches the paired draw.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw ValueError("uniform_index: n must be positive");
    // 64-bit multiply-shift; bias is below 2^-11 for any n representable here.
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(eng_()) * n) >> 64);
  }

 private:
  std::mt19937_64 eng_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace crpsrft
