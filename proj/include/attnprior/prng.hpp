#pragma once

#include <cmath>
#include <cstdint>

namespace attnprior {

// xoshiro256** seeded through SplitMix64. Every stochastic operation in the
// project draws from an instance of this generator; derived streams make
// shard/grid parallelism reproducible independent of scheduling. The outputs
// are bit-stable across platforms, unlike std:: distributions.
class Prng {
 public:
  explicit Prng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& si : s_) si = splitmix64(x);
    cached_ = false;
    cache_ = 0.0;
  }

  std::uint64_t seed() const { return seed_; }

  /// Independent child stream. derive(tag) is a pure function of (seed, tag).
  Prng derive(std::uint64_t tag) const {
    std::uint64_t x = seed_ ^ (0x9e3779b97f4a7c15ULL + tag * 0xbf58476d1ce4e5b9ULL);
    x = splitmix64(x) ^ splitmix64(x += tag);
    return Prng(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    // Rejection keeps the draw unbiased for any n.
    const std::uint64_t lim = ~std::uint64_t(0) - ~std::uint64_t(0) % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= lim);
    return x % n;
  }

  /// Standard normal via Box-Muller (pairs cached).
  double normal() {
    if (cached_) {
      cached_ = false;
      return cache_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    cache_ = r * std::sin(theta);
    cached_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool cached_;
  double cache_;
};

}  // namespace attnprior
