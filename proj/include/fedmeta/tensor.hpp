// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedmeta/dual.hpp"
#include "fedmeta/errors.hpp"

namespace fedmeta {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. `T` is `double` or `Dual`.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_)) { check_extents(); }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_size(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
  }

  static Tensor scalar(T x) { return Tensor({1}, {x}); }

  /// Shape-[n] vector.
  static Tensor vector(std::vector<T> data) {
    const std::size_t n = data.size();
    return Tensor({n}, std::move(data));
  }

  /// Row-major 2-D tensor from nested rows.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<T> d;
    d.reserve(m * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw ShapeError("ragged matrix literal");
      d.insert(d.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(d));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != size())
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(s));
    return Tensor(std::move(s), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> d(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(d));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (std::size_t e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
bool all_finite(const Tensor<T>& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](const T& v) { return is_finite(v); });
}

template <class T>
void require_finite(const Tensor<T>& x, const char* what) {
  if (!all_finite(x)) throw NumericError(std::string("non-finite values in ") + what);
}

/// Value part of a tensor (identity for double).
template <class T>
Tensor<double> values_of(const Tensor<T>& x) {
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = value_of(x[i]);
  return Tensor<double>(x.shape(), std::move(d));
}

inline Tensor<double> tangents_of(const Tensor<Dual>& x) {
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i].t;
  return Tensor<double>(x.shape(), std::move(d));
}

inline Tensor<Dual> make_dual(const Tensor<double>& value, const Tensor<double>& tangent) {
  if (value.shape() != tangent.shape())
    throw ShapeError("dual value/tangent shapes differ: " + shape_string(value.shape()) + " vs " +
                     shape_string(tangent.shape()));
  std::vector<Dual> d(value.size());
  for (std::size_t i = 0; i < value.size(); ++i) d[i] = Dual(value[i], tangent[i]);
  return Tensor<Dual>(value.shape(), std::move(d));
}

}  // namespace fedmeta
