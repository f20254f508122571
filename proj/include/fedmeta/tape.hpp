// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0
//
// Recordable computation tape with reverse-mode differentiation.
//
// Every op evaluates eagerly and appends a node whose inputs are earlier
// nodes, so the node list is already in topological order. The tape is
// templated on the scalar type: over `double` it gives gradients, over `Dual`
// the same reverse sweep propagates tangents and gives Hessian-vector
// products (forward-over-reverse).

#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "fedmeta/dual.hpp"
#include "fedmeta/errors.hpp"
#include "fedmeta/tensor.hpp"

namespace fedmeta {

/// Handle to a node on a specific tape.
struct Var {
  std::size_t id = 0;
  std::uint64_t tape = 0;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kSum,
  kMatMul,
  kAddBias,
  kRelu,
  kReshape,
  kSlice,
  kIm2Col,
  kMaxPool2,
  kSoftmaxXent,
};

namespace detail {
inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <class T>
class Gradients;

template <class T>
class Tape {
 public:
  Tape() : id_(detail::next_tape_id()) {}

  // Tapes are identified by id; copies would alias Vars across tapes.
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  /// Differentiable input.
  Var leaf(Tensor<T> value) {
    Node n;
    n.op = OpKind::kLeaf;
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n), false);
  }

  Var constant(Tensor<T> value) {
    Node n;
    n.op = OpKind::kConstant;
    n.value = std::move(value);
    return push(std::move(n), false);
  }

  /// Lifts plain data (features, masks) onto a tape of any scalar type.
  Var constant(const Tensor<double>& value)
    requires(!std::is_same_v<T, double>)
  {
    return constant(value.template cast<T>());
  }

  Var add(Var a, Var b) { return binary_same_shape(OpKind::kAdd, a, b, "add"); }
  Var sub(Var a, Var b) { return binary_same_shape(OpKind::kSub, a, b, "sub"); }
  /// Elementwise product.
  Var mul(Var a, Var b) { return binary_same_shape(OpKind::kMul, a, b, "mul"); }

  Var scale(Var a, double c) {
    Node n = unary(OpKind::kScale, a);
    n.scalar = c;
    return push(std::move(n));
  }

  /// Sum of all entries, shape [1].
  Var sum(Var a) { return push(unary(OpKind::kSum, a)); }

  Var matmul(Var a, Var b) {
    const auto& sa = shape(a);
    const auto& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
      throw ShapeError("matmul shape mismatch: " + shape_string(sa) + " x " + shape_string(sb));
    return push(binary(OpKind::kMatMul, a, b));
  }

  /// x[m×n] + bias[n] broadcast over rows.
  Var add_bias(Var x, Var bias) {
    const auto& sx = shape(x);
    const auto& sb = shape(bias);
    if (sx.size() != 2 || sb.size() != 1 || sb[0] != sx[1])
      throw ShapeError("add_bias shape mismatch: " + shape_string(sx) + " + " + shape_string(sb));
    return push(binary(OpKind::kAddBias, x, bias));
  }

  Var relu(Var x) { return push(unary(OpKind::kRelu, x)); }

  Var reshape(Var x, Shape s) {
    if (shape_size(s) != node(x).value.size())
      throw ShapeError("cannot reshape " + shape_string(shape(x)) + " to " + shape_string(s));
    Node n = unary(OpKind::kReshape, x);
    n.out_shape = std::move(s);
    return push(std::move(n));
  }

  /// Contiguous window of a flat input, viewed with the given shape.
  Var slice(Var x, std::size_t offset, Shape s) {
    if (offset + shape_size(s) > node(x).value.size())
      throw ShapeError("slice [" + std::to_string(offset) + ", +" + std::to_string(shape_size(s)) +
                       ") out of range for " + shape_string(shape(x)));
    Node n = unary(OpKind::kSlice, x);
    n.offset = offset;
    n.out_shape = std::move(s);
    return push(std::move(n));
  }

  /// Patch extraction for a stride-1, unpadded convolution over an NHWC input.
  /// Output is [N·OH·OW, kh·kw·C]; rows ordered (n, oh, ow), columns (ky, kx, c).
  Var im2col(Var x, std::size_t kh, std::size_t kw) {
    const auto& s = shape(x);
    if (s.size() != 4 || kh == 0 || kw == 0 || s[1] < kh || s[2] < kw)
      throw ShapeError("im2col expects NHWC input at least as large as the kernel, got " + shape_string(s));
    const std::size_t N = s[0], H = s[1], W = s[2], C = s[3];
    const std::size_t OH = H - kh + 1, OW = W - kw + 1;
    Node n = unary(OpKind::kIm2Col, x);
    n.out_shape = {N * OH * OW, kh * kw * C};
    n.index.reserve(N * OH * OW * kh * kw * C);
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx)
              for (std::size_t c = 0; c < C; ++c)
                n.index.push_back(((b * H + oy + ky) * W + ox + kx) * C + c);
    return push(std::move(n));
  }

  /// 2×2 max pooling with stride 2 over NHWC; odd trailing rows/cols dropped.
  /// Ties route the gradient to the first maximal element.
  Var maxpool2(Var x) {
    const auto& s = shape(x);
    if (s.size() != 4 || s[1] < 2 || s[2] < 2)
      throw ShapeError("maxpool2 expects NHWC input with H,W >= 2, got " + shape_string(s));
    Node n = unary(OpKind::kMaxPool2, x);
    n.out_shape = {s[0], s[1] / 2, s[2] / 2, s[3]};
    return push(std::move(n));
  }

  /// Mean over rows of −log softmax(logits)[label].
  Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
    const auto& s = shape(logits);
    if (s.size() != 2) throw ShapeError("softmax_cross_entropy expects [batch, classes], got " + shape_string(s));
    if (labels.size() != s[0])
      throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch " +
                       std::to_string(s[0]));
    for (std::size_t y : labels)
      if (y >= s[1])
        throw DataError("label " + std::to_string(y) + " out of range for " + std::to_string(s[1]) + " classes");
    Node n = unary(OpKind::kSoftmaxXent, logits);
    n.index.assign(labels.begin(), labels.end());
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  const Shape& shape(Var v) const { return node(v).value.shape(); }
  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(Var v) const { return node(v).op; }

  /// Inputs of a node, for structural checks.
  std::vector<std::size_t> inputs(Var v) const {
    const Node& n = node(v);
    std::vector<std::size_t> r;
    if (n.a != kNone) r.push_back(n.a);
    if (n.b != kNone) r.push_back(n.b);
    return r;
  }

  std::vector<Var> leaves() const {
    std::vector<Var> r;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op == OpKind::kLeaf) r.push_back({i, id_});
    return r;
  }

  /// Re-evaluates every node with new leaf values (in leaf creation order).
  void replay(std::span<const Tensor<T>> leaf_values) {
    std::size_t next = 0;
    for (auto& n : nodes_) {
      if (n.op == OpKind::kLeaf) {
        if (next >= leaf_values.size()) throw ShapeError("replay: too few leaf values");
        if (leaf_values[next].shape() != n.value.shape())
          throw ShapeError("replay: leaf shape changed from " + shape_string(n.value.shape()) + " to " +
                           shape_string(leaf_values[next].shape()));
        n.value = leaf_values[next++];
      } else if (n.op != OpKind::kConstant) {
        evaluate(n);
      }
    }
    if (next != leaf_values.size()) throw ShapeError("replay: too many leaf values");
  }

  /// Reverse sweep from a scalar output.
  Gradients<T> backward(Var output) const;

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  struct Node {
    OpKind op = OpKind::kConstant;
    std::size_t a = kNone;
    std::size_t b = kNone;
    bool requires_grad = false;
    double scalar = 0.0;
    std::size_t offset = 0;
    Shape out_shape;
    std::vector<std::size_t> index;
    Tensor<T> value;
    Tensor<T> saved;
  };

  friend class Gradients<T>;

  const Node& node(Var v) const {
    if (v.tape != id_) throw Error("variable belongs to a different tape");
    if (v.id >= nodes_.size()) throw Error("variable id out of range");
    return nodes_[v.id];
  }

  Node unary(OpKind op, Var a) {
    const Node& in = node(a);
    Node n;
    n.op = op;
    n.a = a.id;
    n.requires_grad = in.requires_grad;
    return n;
  }

  Node binary(OpKind op, Var a, Var b) {
    Node n = unary(op, a);
    n.b = b.id;
    n.requires_grad = n.requires_grad || node(b).requires_grad;
    return n;
  }

  Var binary_same_shape(OpKind op, Var a, Var b, const char* name) {
    if (shape(a) != shape(b))
      throw ShapeError(std::string(name) + " shape mismatch: " + shape_string(shape(a)) + " vs " +
                       shape_string(shape(b)));
    return push(binary(op, a, b));
  }

  Var push(Node n, bool eval = true) {
    if (eval) evaluate(n);
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1, id_};
  }

  void evaluate(Node& n) const {
    if (n.op == OpKind::kLeaf || n.op == OpKind::kConstant) return;
    const Tensor<T>& x = nodes_[n.a].value;
    switch (n.op) {
      case OpKind::kLeaf:
      case OpKind::kConstant:
        return;
      case OpKind::kAdd:
      case OpKind::kSub:
      case OpKind::kMul: {
        const Tensor<T>& y = nodes_[n.b].value;
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i)
          out[i] = n.op == OpKind::kAdd ? x[i] + y[i] : n.op == OpKind::kSub ? x[i] - y[i] : x[i] * y[i];
        n.value = std::move(out);
        return;
      }
      case OpKind::kScale: {
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * T(n.scalar);
        n.value = std::move(out);
        return;
      }
      case OpKind::kSum: {
        T s{};
        for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
        n.value = Tensor<T>::scalar(s);
        return;
      }
      case OpKind::kMatMul: {
        const Tensor<T>& y = nodes_[n.b].value;
        const std::size_t m = x.dim(0), k = x.dim(1), cols = y.dim(1);
        Tensor<T> out({m, cols});
        for (std::size_t i = 0; i < m; ++i) {
          T* row = &out[i * cols];
          for (std::size_t p = 0; p < k; ++p) {
            const T aip = x[i * k + p];
            const T* brow = &y[p * cols];
            for (std::size_t j = 0; j < cols; ++j) row[j] += aip * brow[j];
          }
        }
        n.value = std::move(out);
        return;
      }
      case OpKind::kAddBias: {
        const Tensor<T>& bias = nodes_[n.b].value;
        Tensor<T> out = x;
        const std::size_t cols = x.dim(1);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % cols];
        n.value = std::move(out);
        return;
      }
      case OpKind::kRelu: {
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i)
          if (value_of(x[i]) > 0.0) out[i] = x[i];
        n.value = std::move(out);
        return;
      }
      case OpKind::kReshape:
        n.value = Tensor<T>(n.out_shape, x.storage());
        return;
      case OpKind::kSlice: {
        const auto first = x.storage().begin() + static_cast<std::ptrdiff_t>(n.offset);
        n.value = Tensor<T>(n.out_shape,
                            std::vector<T>(first, first + static_cast<std::ptrdiff_t>(shape_size(n.out_shape))));
        return;
      }
      case OpKind::kIm2Col: {
        Tensor<T> out(n.out_shape);
        for (std::size_t j = 0; j < n.index.size(); ++j) out[j] = x[n.index[j]];
        n.value = std::move(out);
        return;
      }
      case OpKind::kMaxPool2: {
        const std::size_t H = x.dim(1), W = x.dim(2), C = x.dim(3);
        const std::size_t N = n.out_shape[0], OH = n.out_shape[1], OW = n.out_shape[2];
        Tensor<T> out(n.out_shape);
        n.index.assign(out.size(), 0);
        std::size_t j = 0;
        for (std::size_t b = 0; b < N; ++b)
          for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox)
              for (std::size_t c = 0; c < C; ++c, ++j) {
                std::size_t best = ((b * H + 2 * oy) * W + 2 * ox) * C + c;
                for (std::size_t dy = 0; dy < 2; ++dy)
                  for (std::size_t dx = 0; dx < 2; ++dx) {
                    const std::size_t idx = ((b * H + 2 * oy + dy) * W + 2 * ox + dx) * C + c;
                    if (value_of(x[idx]) > value_of(x[best])) best = idx;
                  }
                n.index[j] = best;
                out[j] = x[best];
              }
        n.value = std::move(out);
        return;
      }
      case OpKind::kSoftmaxXent: {
        const std::size_t rows = x.dim(0), cols = x.dim(1);
        Tensor<T> probs(x.shape());
        T total{};
        for (std::size_t i = 0; i < rows; ++i) {
          double mx = value_of(x(i, 0));
          for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, value_of(x(i, j)));
          T s{};
          for (std::size_t j = 0; j < cols; ++j) {
            probs(i, j) = exp(x(i, j) - T(mx));
            s += probs(i, j);
          }
          for (std::size_t j = 0; j < cols; ++j) probs(i, j) = probs(i, j) / s;
          total += (T(mx) + log(s)) - x(i, n.index[i]);
        }
        n.value = Tensor<T>::scalar(total / T(static_cast<double>(rows)));
        n.saved = std::move(probs);
        return;
      }
    }
  }

  static T exp(const T& x) {
    using std::exp;
    return exp(x);
  }
  static T log(const T& x) {
    using std::log;
    return log(x);
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

/// Gradients of one scalar output with respect to every leaf of a tape.
/// Leaves the output does not depend on get zero tensors.
template <class T>
class Gradients {
 public:
  const Tensor<T>& operator[](Var leaf) const {
    if (leaf.tape != tape_id_) throw Error("leaf not on tape");
    for (std::size_t i = 0; i < leaf_ids_.size(); ++i)
      if (leaf_ids_[i] == leaf.id) return grads_[i];
    throw Error("leaf not on tape");
  }

 private:
  friend class Tape<T>;
  std::uint64_t tape_id_ = 0;
  std::vector<std::size_t> leaf_ids_;
  std::vector<Tensor<T>> grads_;
};

template <class T>
Gradients<T> Tape<T>::backward(Var output) const {
  const Node& out = node(output);
  if (out.value.size() != 1)
    throw ShapeError("backward requires a scalar output, got shape " + shape_string(out.value.shape()));

  std::vector<Tensor<T>> g(output.id + 1);
  g[output.id] = Tensor<T>(out.value.shape(), {T(1.0)});

  auto grad_of = [&](std::size_t j) -> Tensor<T>& {
    if (g[j].empty()) g[j] = Tensor<T>(nodes_[j].value.shape());
    return g[j];
  };

  for (std::size_t id = output.id + 1; id-- > 0;) {
    if (g[id].empty()) continue;
    const Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    const Tensor<T>& gy = g[id];
    const bool ga = n.a != kNone && nodes_[n.a].requires_grad;
    const bool gb = n.b != kNone && nodes_[n.b].requires_grad;
    switch (n.op) {
      case OpKind::kLeaf:
      case OpKind::kConstant:
        break;
      case OpKind::kAdd:
      case OpKind::kSub:
        if (ga) {
          auto& d = grad_of(n.a);
          for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i];
        }
        if (gb) {
          auto& d = grad_of(n.b);
          for (std::size_t i = 0; i < gy.size(); ++i)
            if (n.op == OpKind::kAdd)
              d[i] += gy[i];
            else
              d[i] -= gy[i];
        }
        break;
      case OpKind::kMul: {
        const auto& x = nodes_[n.a].value;
        const auto& y = nodes_[n.b].value;
        if (ga) {
          auto& d = grad_of(n.a);
          for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i] * y[i];
        }
        if (gb) {
          auto& d = grad_of(n.b);
          for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i] * x[i];
        }
        break;
      }
      case OpKind::kScale: {
        auto& d = grad_of(n.a);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i] * T(n.scalar);
        break;
      }
      case OpKind::kSum: {
        auto& d = grad_of(n.a);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[0];
        break;
      }
      case OpKind::kMatMul: {
        const auto& x = nodes_[n.a].value;
        const auto& y = nodes_[n.b].value;
        const std::size_t m = x.dim(0), k = x.dim(1), cols = y.dim(1);
        if (ga) {
          auto& d = grad_of(n.a);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T s{};
              const T* grow = &gy[i * cols];
              const T* yrow = &y[p * cols];
              for (std::size_t j = 0; j < cols; ++j) s += grow[j] * yrow[j];
              d[i * k + p] += s;
            }
        }
        if (gb) {
          auto& d = grad_of(n.b);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T xip = x[i * k + p];
              T* drow = &d[p * cols];
              const T* grow = &gy[i * cols];
              for (std::size_t j = 0; j < cols; ++j) drow[j] += xip * grow[j];
            }
        }
        break;
      }
      case OpKind::kAddBias: {
        if (ga) {
          auto& d = grad_of(n.a);
          for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i];
        }
        if (gb) {
          auto& d = grad_of(n.b);
          const std::size_t cols = d.size();
          for (std::size_t i = 0; i < gy.size(); ++i) d[i % cols] += gy[i];
        }
        break;
      }
      case OpKind::kRelu: {
        // The mask depends on values only: the second derivative is zero everywhere.
        const auto& x = nodes_[n.a].value;
        auto& d = grad_of(n.a);
        for (std::size_t i = 0; i < gy.size(); ++i)
          if (value_of(x[i]) > 0.0) d[i] += gy[i];
        break;
      }
      case OpKind::kReshape: {
        auto& d = grad_of(n.a);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i];
        break;
      }
      case OpKind::kSlice: {
        auto& d = grad_of(n.a);
        for (std::size_t i = 0; i < gy.size(); ++i) d[n.offset + i] += gy[i];
        break;
      }
      case OpKind::kIm2Col:
      case OpKind::kMaxPool2: {
        auto& d = grad_of(n.a);
        for (std::size_t j = 0; j < gy.size(); ++j) d[n.index[j]] += gy[j];
        break;
      }
      case OpKind::kSoftmaxXent: {
        auto& d = grad_of(n.a);
        const std::size_t rows = n.saved.dim(0), cols = n.saved.dim(1);
        const T w = gy[0] / T(static_cast<double>(rows));
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) {
            T p = n.saved(i, j);
            if (j == n.index[i]) p -= T(1.0);
            d(i, j) += w * p;
          }
        break;
      }
    }
  }

  Gradients<T> result;
  result.tape_id_ = id_;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op != OpKind::kLeaf) continue;
    result.leaf_ids_.push_back(i);
    if (i < g.size() && !g[i].empty())
      result.grads_.push_back(std::move(g[i]));
    else
      result.grads_.emplace_back(nodes_[i].value.shape());
  }
  return result;
}

}  // namespace fedmeta
