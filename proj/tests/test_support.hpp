#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedmeta/algorithms.hpp"
#include "fedmeta/params.hpp"
#include "fedmeta/rng.hpp"
#include "fedmeta/tape.hpp"

namespace fedmeta::testing {

/// L(ω) = ½(ω−c)ᵀA(ω−c), independent of the batch. `n` only sets the
/// aggregation weight.
struct QuadraticObjective {
  Tensor<double> a;  // [d, d], symmetric
  Tensor<double> c;  // [d]
  std::size_t n = 1;

  std::size_t example_count() const { return n; }

  template <class T>
  Var loss(Tape<T>& tape, Var p, std::span<const std::size_t>, std::optional<std::uint64_t>) const {
    const std::size_t d = c.size();
    const Var diff = tape.reshape(tape.sub(p, tape.constant(c)), {1, d});
    const Var ad = tape.matmul(diff, tape.constant(a));
    return tape.scale(tape.sum(tape.mul(ad, diff)), 0.5);
  }
};

inline Layout flat_layout(std::size_t d) { return Layout({{"w", {d}}}); }

inline ParamVector flat(std::vector<double> v) {
  const std::size_t d = v.size();
  return ParamVector(flat_layout(d), Tensor<double>::vector(std::move(v)));
}

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * standard_normal(rng);
  return t;
}

}  // namespace fedmeta::testing
