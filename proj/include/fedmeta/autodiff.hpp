// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0
//
// Functional entry points over the tape: gradients and Hessian-vector
// products of scalar losses built by a caller-supplied generic callable
// `build(tape, theta) -> Var`, invoked once with Tape<double> and once with
// Tape<Dual>.

#pragma once

#include <utility>

#include "fedmeta/dual.hpp"
#include "fedmeta/params.hpp"
#include "fedmeta/tape.hpp"
#include "fedmeta/tensor.hpp"

namespace fedmeta {

struct ValueAndGrad {
  double value = 0.0;
  Tensor<double> grad;
};

template <class Build>
ValueAndGrad value_and_grad(Build&& build, const Tensor<double>& theta) {
  Tape<double> tape;
  const Var p = tape.leaf(theta);
  const Var loss = build(tape, p);
  const double value = tape.value(loss)[0];
  auto grads = tape.backward(loss);
  return {value, grads[p]};
}

/// H(θ)·v by forward-over-reverse: θ carries tangent v through the forward
/// pass and the reverse sweep, so the tangent of the gradient is H·v.
template <class Build>
Tensor<double> hvp(Build&& build, const Tensor<double>& theta, const Tensor<double>& v) {
  Tape<Dual> tape;
  const Var p = tape.leaf(make_dual(theta, v));
  const Var loss = build(tape, p);
  auto grads = tape.backward(loss);
  return tangents_of(grads[p]);
}

template <class Build>
ParamVector hvp(Build&& build, const ParamVector& theta, const ParamVector& v) {
  require_same_layout(theta, v);
  return {theta.layout(), hvp(std::forward<Build>(build), theta.values(), v.values())};
}

}  // namespace fedmeta
