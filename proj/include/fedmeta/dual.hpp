// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

namespace fedmeta {

/// First-order dual number v + t·ε with ε² = 0. Running the reverse sweep of a
/// tape over Dual scalars, seeded with tangent v on the parameters, yields the
/// gradient in the value part and the Hessian-vector product in the tangent.
struct Dual {
  double v = 0.0;
  double t = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double value) : v(value) {}  // NOLINT: implicit lift of constants
  constexpr Dual(double value, double tangent) : v(value), t(tangent) {}

  constexpr Dual& operator+=(const Dual& o) {
    v += o.v;
    t += o.t;
    return *this;
  }
  constexpr Dual& operator-=(const Dual& o) {
    v -= o.v;
    t -= o.t;
    return *this;
  }
  constexpr Dual& operator*=(const Dual& o) {
    t = t * o.v + v * o.t;
    v *= o.v;
    return *this;
  }
  constexpr Dual& operator/=(const Dual& o) {
    t = (t * o.v - v * o.t) / (o.v * o.v);
    v /= o.v;
    return *this;
  }
};

constexpr Dual operator-(const Dual& a) { return {-a.v, -a.t}; }
constexpr Dual operator+(Dual a, const Dual& b) { return a += b; }
constexpr Dual operator-(Dual a, const Dual& b) { return a -= b; }
constexpr Dual operator*(Dual a, const Dual& b) { return a *= b; }
constexpr Dual operator/(Dual a, const Dual& b) { return a /= b; }

inline Dual exp(const Dual& a) {
  const double e = std::exp(a.v);
  return {e, e * a.t};
}
inline Dual log(const Dual& a) { return {std::log(a.v), a.t / a.v}; }

constexpr double value_of(double x) { return x; }
constexpr double value_of(const Dual& x) { return x.v; }

inline bool is_finite(double x) { return std::isfinite(x); }
inline bool is_finite(const Dual& x) { return std::isfinite(x.v) && std::isfinite(x.t); }

}  // namespace fedmeta
