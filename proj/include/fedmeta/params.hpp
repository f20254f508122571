// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "fedmeta/errors.hpp"
#include "fedmeta/tensor.hpp"

namespace fedmeta {

struct ParamBlock {
  std::string name;
  Shape shape;
  friend bool operator==(const ParamBlock&, const ParamBlock&) = default;
};

/// Ordered named blocks making up a flat parameter vector.
class Layout {
 public:
  Layout() = default;
  explicit Layout(std::vector<ParamBlock> blocks) : blocks_(std::move(blocks)) {
    offsets_.reserve(blocks_.size());
    for (const auto& b : blocks_) {
      offsets_.push_back(total_);
      total_ += shape_size(b.shape);
    }
  }

  const std::vector<ParamBlock>& blocks() const noexcept { return blocks_; }
  std::size_t offset(std::size_t block) const { return offsets_.at(block); }
  std::size_t total() const noexcept { return total_; }

  friend bool operator==(const Layout& a, const Layout& b) { return a.blocks_ == b.blocks_; }

 private:
  std::vector<ParamBlock> blocks_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
};

/// Flattened model parameters. The unit every federated algorithm moves around.
class ParamVector {
 public:
  ParamVector() = default;

  ParamVector(Layout layout, Tensor<double> values) : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.rank() != 1 || values_.size() != layout_.total())
      throw ShapeError("parameter values " + shape_string(values_.shape()) + " do not match layout of " +
                       std::to_string(layout_.total()));
  }

  static ParamVector zeros(const Layout& layout) { return {layout, Tensor<double>({layout.total()})}; }

  /// Concatenates per-block tensors in layout order.
  static ParamVector flatten(const Layout& layout, const std::vector<Tensor<double>>& blocks) {
    if (blocks.size() != layout.blocks().size()) throw ShapeError("block count does not match layout");
    std::vector<double> flat;
    flat.reserve(layout.total());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (blocks[i].shape() != layout.blocks()[i].shape)
        throw ShapeError("block '" + layout.blocks()[i].name + "' has shape " + shape_string(blocks[i].shape()) +
                         ", expected " + shape_string(layout.blocks()[i].shape));
      flat.insert(flat.end(), blocks[i].storage().begin(), blocks[i].storage().end());
    }
    return {layout, Tensor<double>::vector(std::move(flat))};
  }

  std::vector<Tensor<double>> unflatten() const {
    std::vector<Tensor<double>> out;
    for (std::size_t i = 0; i < layout_.blocks().size(); ++i) {
      const auto& b = layout_.blocks()[i];
      const auto first = values_.storage().begin() + static_cast<std::ptrdiff_t>(layout_.offset(i));
      out.emplace_back(b.shape,
                       std::vector<double>(first, first + static_cast<std::ptrdiff_t>(shape_size(b.shape))));
    }
    return out;
  }

  const Layout& layout() const noexcept { return layout_; }
  const Tensor<double>& values() const noexcept { return values_; }
  Tensor<double>& values() noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  Layout layout_;
  Tensor<double> values_;
};

inline void require_same_layout(const ParamVector& a, const ParamVector& b) {
  if (!(a.layout() == b.layout())) throw ShapeError("parameter layout mismatch");
}

/// y ← y + alpha·x
inline void axpy(double alpha, const ParamVector& x, ParamVector& y) {
  require_same_layout(x, y);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline ParamVector operator+(ParamVector a, const ParamVector& b) {
  axpy(1.0, b, a);
  return a;
}

inline ParamVector operator-(ParamVector a, const ParamVector& b) {
  axpy(-1.0, b, a);
  return a;
}

inline ParamVector operator*(double s, ParamVector a) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= s;
  return a;
}

inline double dot(const ParamVector& a, const ParamVector& b) {
  require_same_layout(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const ParamVector& a) { return std::sqrt(dot(a, a)); }

inline double max_abs_diff(const ParamVector& a, const ParamVector& b) {
  require_same_layout(a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace fedmeta
