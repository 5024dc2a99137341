#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace musiq {

// Deterministic random source. Distribution sampling is written out by hand
// (std:: distributions are implementation-defined), so a given seed yields
// the same stream on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed ^ 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  int64_t below(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Box-Muller; one draw consumed per call pair, cached value discarded to
  // keep the stream position a simple function of call count.
  double normal() {
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Rejection-sampled truncation at +/- 2 sigma.
  double truncated_normal(double stddev) {
    double v = normal();
    while (std::abs(v) > 2.0) v = normal();
    return v * stddev;
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = below(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace musiq
