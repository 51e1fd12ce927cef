#pragma once

// Test-only brute-force oracle for the six-path throughput program: enumerate
// every basis of six tight constraints among the capacity and nonnegativity
// rows, solve the 6x6 system, and keep the best feasible vertex. Kept
// independent of the shipped simplex on purpose.

#include <array>
#include <cmath>

#include "speckv/analytics.hpp"

namespace speckv::testing {

inline double vertex_enumeration_optimum(const std::array<PathCost, 6>& costs,
                                         const PoolCapacities& caps, std::int64_t K) {
  std::array<std::array<double, 6>, 6> a{};
  std::array<double, 6> b{};
  for (int j = 0; j < 6; ++j) {
    a[0][j] = costs[j].local.net;
    a[1][j] = costs[j].local.gpu;
    a[2][j] = costs[j].local.mem;
    a[3][j] = costs[j].remote.net;
    a[4][j] = costs[j].remote.gpu;
    a[5][j] = costs[j].remote.mem;
  }
  b = {static_cast<double>(caps.local_gpus), static_cast<double>(caps.local_gpus),
       static_cast<double>(caps.local_gpus) * caps.b_max, static_cast<double>(caps.remote_gpus),
       static_cast<double>(caps.remote_gpus), static_cast<double>(caps.remote_gpus) * caps.b_max};

  double best = 0.0;  // n = 0 is always feasible
  for (int mask = 0; mask < (1 << 12); ++mask) {
    if (__builtin_popcount(mask) != 6) continue;
    std::array<std::array<double, 7>, 6> sys{};
    int row = 0;
    for (int r = 0; r < 12; ++r) {
      if (!(mask & (1 << r))) continue;
      if (r < 6) {
        for (int j = 0; j < 6; ++j) sys[row][j] = a[r][j];
        sys[row][6] = b[r];
      } else {
        sys[row][r - 6] = 1.0;
        sys[row][6] = 0.0;
      }
      ++row;
    }
    std::array<double, 6> x{};
    bool singular = false;
    for (int col = 0; col < 6 && !singular; ++col) {
      int piv = col;
      for (int r = col + 1; r < 6; ++r) {
        if (std::abs(sys[r][col]) > std::abs(sys[piv][col])) piv = r;
      }
      if (std::abs(sys[piv][col]) < 1e-11) {
        singular = true;
        break;
      }
      std::swap(sys[piv], sys[col]);
      for (int r = 0; r < 6; ++r) {
        if (r == col) continue;
        double f = sys[r][col] / sys[col][col];
        for (int j = col; j <= 6; ++j) sys[r][j] -= f * sys[col][j];
      }
    }
    if (singular) continue;
    for (int j = 0; j < 6; ++j) x[j] = sys[j][6] / sys[j][j];
    bool ok = true;
    for (int j = 0; j < 6 && ok; ++j) ok = x[j] >= -1e-7;
    for (int r = 0; r < 6 && ok; ++r) {
      double lhs = 0.0;
      for (int j = 0; j < 6; ++j) lhs += a[r][j] * x[j];
      ok = lhs <= b[r] + 1e-7 * std::max(1.0, b[r]);
    }
    if (!ok) continue;
    double obj = 0.0;
    for (int j = 0; j < 6; ++j) obj += K * std::max(0.0, x[j]);
    best = std::max(best, obj);
  }
  return best;
}

}  // namespace speckv::testing
