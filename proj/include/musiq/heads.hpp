#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "musiq/common.hpp"

namespace musiq {

inline void check_distribution(std::span<const double> p, const char* what) {
  double sum = 0.0;
  for (double v : p) {
    if (v < 0.0) throw ShapeError(std::string(what) + ": negative probability");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw ShapeError(std::string(what) + ": distribution does not sum to 1");
}

// ((1/B) * sum_m |CDF_p(m) - CDF_q(m)|^r)^(1/r) over B buckets.
inline double emd_distance(std::span<const double> p, std::span<const double> q, double r) {
  if (p.size() != q.size()) throw ShapeError("emd: bucket counts differ");
  if (p.empty()) throw ShapeError("emd: empty distributions");
  check_distribution(p, "emd");
  check_distribution(q, "emd");
  double cp = 0.0, cq = 0.0, s = 0.0;
  for (size_t m = 0; m < p.size(); ++m) {
    cp += p[m];
    cq += q[m];
    s += std::pow(std::abs(cp - cq), r);
  }
  return std::pow(s / static_cast<double>(p.size()), 1.0 / r);
}

inline double l1_distance(double pred, double target) { return std::abs(pred - target); }

// Buckets are scored 1..B.
inline double distribution_mean_score(std::span<const double> p) {
  double m = 0.0;
  for (size_t i = 0; i < p.size(); ++i) m += static_cast<double>(i + 1) * p[i];
  return m;
}

}  // namespace musiq
