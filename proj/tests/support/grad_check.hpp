#pragma once

// Central finite differences, kept independent of the analytic backward code.

#include "pckd/types.hpp"

#include <algorithm>
#include <functional>

namespace pckd::testing {

/// Numerical gradient of f with respect to every entry of x (x is restored).
template <typename MatrixType>
MatrixType numeric_gradient(const std::function<double()>& f, MatrixType& x, double step = 1e-6) {
  MatrixType g(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      const double orig = x(i, j);
      x(i, j) = orig + step;
      const double up = f();
      x(i, j) = orig - step;
      const double down = f();
      x(i, j) = orig;
      g(i, j) = (up - down) / (2 * step);
    }
  }
  return g;
}

/// |a - n| / max(|a| + |n|, floor), norms taken over the whole gradient.
template <typename A, typename B>
double relative_error(const Eigen::MatrixBase<A>& analytic, const Eigen::MatrixBase<B>& numeric,
                      double floor = 1e-8) {
  const double diff = (analytic - numeric).norm();
  return diff / std::max(analytic.norm() + numeric.norm(), floor);
}

}  // namespace pckd::testing
