#pragma once

// Stream-splittable deterministic RNG.
//
// Contract: the draw sequence is a pure function of (seed, stream).  Workers
// are assigned streams by task index (replication number, path number...),
// never by thread id, so results are reproducible for any worker count.
//
// The generator is xoshiro256++ with SplitMix64 state initialization; all
// variate transforms (uniform, categorical inversion, Box-Muller normals)
// are implemented here rather than through <random> distributions, whose
// algorithms are implementation-defined and would break cross-platform
// reproducibility.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "nettrial/errors.hpp"

namespace nettrial {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
inline std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}
}  // namespace detail

class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream) {
    // Mix the stream id into the seeding chain so streams are independent
    // even for adjacent ids.
    std::uint64_t x = seed ^ (0xD2B74407B1CE6E93ULL * (stream + 1));
    for (auto& s : s_) s = detail::splitmix64(x);
    bool all_zero = true;
    for (auto s : s_) all_zero = all_zero && s == 0;
    if (all_zero) s_[0] = 1;  // xoshiro state must not be identically zero
  }

  std::uint64_t u64() {
    const std::uint64_t result = detail::rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = detail::rotl(s_[3], 45);
    return result;
  }

  // Uniform on [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in {0, ..., n-1}.
  int uniform_int(int n) {
    if (n <= 0) throw ValidationError("uniform_int: n must be positive");
    // Lemire's multiply-shift; unbiased enough for our n (always tiny) and
    // fully deterministic.
    unsigned __int128 m =
        static_cast<unsigned __int128>(u64()) * static_cast<unsigned __int128>(n);
    return static_cast<int>(m >> 64);
  }

  // Index draw from an unnormalized nonnegative weight vector by CDF
  // inversion.  The last positive-weight cell absorbs roundoff.
  int categorical(std::span<const double> w) {
    double total = 0.0;
    for (double v : w) total += v;
    if (!(total > 0.0)) throw ValidationError("categorical: total weight must be positive");
    double u = uniform() * total;
    double acc = 0.0;
    int last_pos = -1;
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (w[k] > 0.0) last_pos = static_cast<int>(k);
      acc += w[k];
      if (u < acc) return static_cast<int>(k);
    }
    return last_pos;
  }

  // Standard normal via Box-Muller (pair-cached).
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t s_[4];
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace nettrial
