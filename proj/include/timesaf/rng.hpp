#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "timesaf/common.hpp"

namespace timesaf {

// mt19937_64 core with hand-written transforms. The engine itself is
// pinned by the standard, but std::normal_distribution and friends are
// implementation-defined, so we keep the uniform->normal mapping explicit
// to make streams reproducible byte-for-byte on any toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // [0, 1), 53-bit resolution
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // standard normal via Box-Muller, pair cached
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // normal clipped by rejection to |z| <= clip before scaling
  double truncated_normal(double stddev, double clip = 2.0) {
    double z = normal();
    while (z < -clip || z > clip) z = normal();
    return z * stddev;
  }

  // unbiased integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                          std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // independent derived stream (e.g. one per epoch or per worker)
  Rng fork(std::uint64_t stream) const {
    std::uint64_t mix = fnv1a64(&seed_, sizeof(seed_));
    mix = fnv1a64(&stream, sizeof(stream), mix);
    return Rng(mix);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace timesaf
