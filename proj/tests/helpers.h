#ifndef HSIFUSE_TESTS_HELPERS_H_
#define HSIFUSE_TESTS_HELPERS_H_

#include <cmath>

#include "hsifuse/core.h"

namespace hsifuse::test {

inline HsiCube random_cube(int b, int h, int w, Rng& rng, double lo = 0.0,
                           double hi = 1.0) {
  HsiCube z(b, h, w);
  for (double& v : z.data()) v = rng.uniform(lo, hi);
  return z;
}

inline double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

// Row-stochastic random b x B matrix.
inline SrfMatrix random_srf(int b, int B, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(b) * B);
  for (int j = 0; j < b; ++j) {
    double s = 0.0;
    for (int i = 0; i < B; ++i) s += w[j * B + i] = rng.uniform(0.05, 1.0);
    for (int i = 0; i < B; ++i) w[j * B + i] /= s;
  }
  return SrfMatrix(b, B, w);
}

}  // namespace hsifuse::test

#endif  // HSIFUSE_TESTS_HELPERS_H_
