#pragma once

#include <cmath>
#include <utility>

#include "musiq/common.hpp"
#include "musiq/tensor.hpp"

namespace musiq {

// Round half away from zero.
inline int round_half_away(double x) {
  return static_cast<int>(x >= 0 ? std::floor(x + 0.5) : std::ceil(x - 0.5));
}

// Hash a patch coordinate into the G x G grid: t = round(i * G / rows),
// clamped so the last row/column cannot fall off the table.
inline std::pair<int, int> hse_index(int i, int j, int rows, int cols, int grid) {
  if (rows < 1 || cols < 1) throw ShapeError("hse_index: grid extents must be >= 1");
  if (i < 0 || i >= rows || j < 0 || j >= cols)
    throw ShapeError("hse_index: patch coordinate out of range");
  int ti = round_half_away(static_cast<double>(i) * grid / rows);
  int tj = round_half_away(static_cast<double>(j) * grid / cols);
  ti = std::min(std::max(ti, 0), grid - 1);
  tj = std::min(std::max(tj, 0), grid - 1);
  return {ti, tj};
}

// Fixed sinusoidal table: rows encode (a, b) grid cells; the first D/2 lanes
// encode a, the rest encode b, with the classic interleaved sin/cos layout
// and frequencies geometric between 1 and 1/10000.
template <typename T>
Tensor<T> sinusoidal_hse_table(int grid, int dim) {
  if (dim % 4 != 0) throw ConfigError("sinusoidal table needs dim divisible by 4");
  Tensor<T> table({grid * grid, dim});
  int half = dim / 2;
  int pairs = half / 2;
  for (int a = 0; a < grid; ++a) {
    for (int b = 0; b < grid; ++b) {
      T* row = table.data() + (static_cast<int64_t>(a) * grid + b) * dim;
      for (int i = 0; i < pairs; ++i) {
        double freq = std::pow(10000.0, -2.0 * i / half);
        row[2 * i] = static_cast<T>(std::sin(a * freq));
        row[2 * i + 1] = static_cast<T>(std::cos(a * freq));
        row[half + 2 * i] = static_cast<T>(std::sin(b * freq));
        row[half + 2 * i + 1] = static_cast<T>(std::cos(b * freq));
      }
    }
  }
  return table;
}

}  // namespace musiq
