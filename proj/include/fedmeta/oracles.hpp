// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference references used to check the analytic derivative paths.
// Nothing on the training path calls into this header.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

#include "fedmeta/errors.hpp"
#include "fedmeta/tensor.hpp"

namespace fedmeta::oracle {

/// Central-difference gradient of a scalar map, one coordinate at a time.
template <class F>
Tensor<double> fd_gradient(F&& f, const Tensor<double>& theta, double eps) {
  Tensor<double> g(theta.shape());
  Tensor<double> x = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = f(x);
    x[i] = orig - eps;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

/// Central difference of f along direction d.
template <class F>
double fd_directional(F&& f, const Tensor<double>& theta, const Tensor<double>& d, double eps) {
  if (theta.shape() != d.shape()) throw ShapeError("direction shape mismatch");
  Tensor<double> plus = theta, minus = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    plus[i] += eps * d[i];
    minus[i] -= eps * d[i];
  }
  return (f(plus) - f(minus)) / (2.0 * eps);
}

/// (∇f(θ+εv) − ∇f(θ−εv)) / 2ε from a gradient callable.
template <class G>
Tensor<double> fd_hvp(G&& grad, const Tensor<double>& theta, const Tensor<double>& v, double eps) {
  if (theta.shape() != v.shape()) throw ShapeError("direction shape mismatch");
  Tensor<double> plus = theta, minus = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    plus[i] += eps * v[i];
    minus[i] -= eps * v[i];
  }
  const Tensor<double> gp = grad(plus);
  const Tensor<double> gm = grad(minus);
  Tensor<double> out(theta.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * eps);
  return out;
}

inline double l2(const Tensor<double>& a) {
  double s = 0.0;
  for (double x : a.data()) s += x * x;
  return std::sqrt(s);
}

/// ‖a − b‖₂ / ‖b‖₂, or the absolute error when the reference is zero.
inline double relative_l2_error(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) throw ShapeError("relative error of mismatched shapes");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double ref = l2(b);
  return ref > 0.0 ? std::sqrt(diff) / ref : std::sqrt(diff);
}

/// |a − b| / max(|a|, |b|), zero when both vanish.
inline double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale > 0.0 ? std::abs(a - b) / scale : 0.0;
}

}  // namespace fedmeta::oracle
