#pragma once

// Test-only finite-difference oracle, independent of the tape implementation.

#include <cmath>
#include <functional>

namespace vf::test {

// Central difference d/dx f at x.
inline double central_diff(const std::function<double(double)>& f, double x,
                           double h = 1e-6) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double got, double want) {
  double denom = std::max(std::abs(want), 1e-12);
  return std::abs(got - want) / denom;
}

}  // namespace vf::test
