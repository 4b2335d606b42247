// gmekit/quadrature.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>

#include "gmekit/common.hpp"
#include "gmekit/gme.hpp"

namespace gmekit {

// Brute-force numerical check of log_expectation for d in {1, 2}: trapezoid
// integration of N(z|0,I) exp(a'z - z'Bz/2) on a wide fixed grid, carried out
// in log space. Deliberately shares no code with the closed form so the two
// can vouch for each other in tests. Far too slow for production scoring.

struct QuadratureSpec {
  double lo = -12.0;
  double hi = 12.0;
  int points_1d = 100000;
  int points_2d = 3001;  // per axis
};

inline double oracle_log_expectation(const GaussianMetaEmbedding& f,
                                     const QuadratureSpec& spec = {}) {
  const int d = f.dim();
  require(d == 1 || d == 2, "oracle_log_expectation: only d = 1 or 2 supported");
  const Matrix b = f.dense_precision();
  const Vector& a = f.a();
  constexpr double kLog2Pi = 1.8378770664093453;

  if (d == 1) {
    const int n = spec.points_1d;
    const double h = (spec.hi - spec.lo) / (n - 1);
    Eigen::ArrayXd z = Eigen::ArrayXd::LinSpaced(n, spec.lo, spec.hi);
    // log integrand: a z - (B+1) z^2 / 2 - log(2 pi)/2
    Eigen::ArrayXd lg = a[0] * z - 0.5 * (b(0, 0) + 1.0) * z.square() - 0.5 * kLog2Pi;
    double m = lg.maxCoeff();
    Eigen::ArrayXd w = (lg - m).exp();
    double s = w.sum() - 0.5 * (w[0] + w[n - 1]);
    return m + std::log(s * h);
  }

  // d == 2: iterate rows of the grid; along a row the log integrand is a
  // quadratic in z2 with coefficients depending on the fixed z1.
  const int n = spec.points_2d;
  const double h = (spec.hi - spec.lo) / (n - 1);
  Eigen::ArrayXd z2 = Eigen::ArrayXd::LinSpaced(n, spec.lo, spec.hi);
  Eigen::ArrayXd z2sq = z2.square();
  const double c22 = -0.5 * (b(1, 1) + 1.0);
  auto log_row = [&](double z1) -> Eigen::ArrayXd {
    double c0 = a[0] * z1 - 0.5 * (b(0, 0) + 1.0) * z1 * z1 - kLog2Pi;
    double c1 = a[1] - b(0, 1) * z1;
    return c0 + c1 * z2 + c22 * z2sq;
  };
  double m = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i)
    m = std::max(m, log_row(spec.lo + i * h).maxCoeff());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    Eigen::ArrayXd w = (log_row(spec.lo + i * h) - m).exp();
    double row = w.sum() - 0.5 * (w[0] + w[n - 1]);
    if (i == 0 || i == n - 1) row *= 0.5;
    total += row;
  }
  return m + std::log(total * h * h);
}

}  // namespace gmekit
