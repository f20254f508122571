// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "fedmeta/datasets.hpp"
#include "fedmeta/errors.hpp"
#include "fedmeta/params.hpp"
#include "fedmeta/rng.hpp"
#include "fedmeta/tape.hpp"
#include "fedmeta/tensor.hpp"

namespace fedmeta {

enum class ModelKind { kLogReg, kMlp, kCnn };

inline const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::kLogReg:
      return "logreg";
    case ModelKind::kMlp:
      return "mlp";
    case ModelKind::kCnn:
      return "cnn";
  }
  return "?";
}

/// Network description. Dense weights are stored [fan_in, fan_out]; conv
/// weights are [k·k·C_in, C_out] to match the im2col column order.
struct Architecture {
  ModelKind kind = ModelKind::kLogReg;
  /// Per-example feature shape: [d] for dense models, [H, W] or [H, W, C] for cnn.
  Shape input;
  std::size_t classes = 0;
  /// Hidden widths (mlp).
  std::vector<std::size_t> hidden;
  /// Channels per 5×5 (or `kernel`) conv layer, each followed by ReLU and 2×2 max pool.
  std::vector<std::size_t> conv_channels;
  std::size_t kernel = 5;
  /// Optional hidden dense layer after the conv stack; 0 disables it.
  std::size_t dense = 0;
  /// Dropout rate on the last hidden activation during training.
  double dropout = 0.0;

  static Architecture logreg(std::size_t dims, std::size_t classes) {
    return {ModelKind::kLogReg, {dims}, classes, {}, {}, 5, 0, 0.0};
  }
  static Architecture mlp(std::size_t dims, std::vector<std::size_t> hidden, std::size_t classes) {
    return {ModelKind::kMlp, {dims}, classes, std::move(hidden), {}, 5, 0, 0.0};
  }
  static Architecture cnn(Shape input, std::vector<std::size_t> channels, std::size_t kernel, std::size_t dense,
                          std::size_t classes) {
    return {ModelKind::kCnn, std::move(input), classes, {}, std::move(channels), kernel, dense, 0.0};
  }

  std::size_t input_size() const { return shape_size(input); }

  Layout layout() const {
    if (classes < 2) throw ConfigError("model needs at least 2 classes");
    if (input.empty() || input_size() == 0) throw ConfigError("model input shape must be non-empty");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout rate must be in [0, 1)");
    std::vector<ParamBlock> blocks;
    auto dense_layer = [&](const std::string& name, std::size_t in, std::size_t out) {
      if (in == 0 || out == 0) throw ConfigError("layer '" + name + "' has a zero dimension");
      blocks.push_back({name + ".weight", {in, out}});
      blocks.push_back({name + ".bias", {out}});
    };
    switch (kind) {
      case ModelKind::kLogReg:
        dense_layer("fc0", input_size(), classes);
        break;
      case ModelKind::kMlp: {
        std::size_t in = input_size();
        for (std::size_t i = 0; i < hidden.size(); ++i) {
          dense_layer("fc" + std::to_string(i), in, hidden[i]);
          in = hidden[i];
        }
        dense_layer("fc" + std::to_string(hidden.size()), in, classes);
        break;
      }
      case ModelKind::kCnn: {
        auto [h, w, c] = cnn_input();
        for (std::size_t i = 0; i < conv_channels.size(); ++i) {
          if (h < kernel || w < kernel) throw ConfigError("conv layer " + std::to_string(i) + " input smaller than kernel");
          dense_layer("conv" + std::to_string(i), kernel * kernel * c, conv_channels[i]);
          h = (h - kernel + 1) / 2;
          w = (w - kernel + 1) / 2;
          c = conv_channels[i];
          if (h == 0 || w == 0) throw ConfigError("conv stack collapses spatial extent to zero");
        }
        std::size_t in = h * w * c;
        if (dense > 0) {
          dense_layer("fc0", in, dense);
          in = dense;
        }
        dense_layer(dense > 0 ? "fc1" : "fc0", in, classes);
        break;
      }
    }
    return Layout(std::move(blocks));
  }

  /// (H, W, C) of the conv input.
  std::tuple<std::size_t, std::size_t, std::size_t> cnn_input() const {
    if (input.size() == 2) return {input[0], input[1], 1};
    if (input.size() == 3) return {input[0], input[1], input[2]};
    throw ConfigError("cnn input must be [H, W] or [H, W, C], got " + shape_string(input));
  }
};

/// Fan-in scaled uniform weights U(−1/√fan_in, 1/√fan_in); zero biases.
inline ParamVector init_params(const Architecture& arch, std::uint64_t seed) {
  const Layout layout = arch.layout();
  Rng rng(derive_seed(seed, {0x696e6974}));
  auto p = ParamVector::zeros(layout);
  for (std::size_t i = 0; i < layout.blocks().size(); ++i) {
    const auto& b = layout.blocks()[i];
    if (b.shape.size() != 2) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(b.shape[0]));
    const std::size_t off = layout.offset(i);
    for (std::size_t j = 0; j < shape_size(b.shape); ++j) p[off + j] = (2.0 * uniform01(rng) - 1.0) * bound;
  }
  return p;
}

namespace detail {

inline Tensor<double> dropout_mask(const Shape& shape, double rate, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x64726f70}));
  Tensor<double> m(shape);
  const double keep = 1.0 - rate;
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = uniform01(rng) < keep ? 1.0 / keep : 0.0;
  return m;
}

template <class T>
Var dense_layer(Tape<T>& tape, Var params, const Layout& layout, std::size_t& block, Var h) {
  const auto& wb = layout.blocks()[block];
  const auto& bb = layout.blocks()[block + 1];
  const Var w = tape.slice(params, layout.offset(block), wb.shape);
  const Var b = tape.slice(params, layout.offset(block + 1), bb.shape);
  block += 2;
  return tape.add_bias(tape.matmul(h, w), b);
}

template <class T>
Var maybe_dropout(Tape<T>& tape, Var h, double rate, std::optional<std::uint64_t> seed) {
  if (rate <= 0.0 || !seed) return h;
  return tape.mul(h, tape.constant(dropout_mask(tape.shape(h), rate, *seed)));
}

}  // namespace detail

/// Logits [batch, classes] for a feature batch [batch, ...]. Dropout is active
/// only when `dropout_seed` is given; the mask is a tape constant, so replays
/// with the same seed are identical.
template <class T>
Var forward_logits(Tape<T>& tape, Var params, const Architecture& arch, const Tensor<double>& features,
                   std::optional<std::uint64_t> dropout_seed = std::nullopt) {
  const Layout layout = arch.layout();
  if (tape.shape(params) != Shape{layout.total()})
    throw ShapeError("parameter vector of shape " + shape_string(tape.shape(params)) + " does not match model with " +
                     std::to_string(layout.total()) + " parameters");
  if (features.empty() || features.rank() < 2) throw DataError("empty batch");
  const std::size_t batch = features.dim(0);
  if (features.size() / batch != arch.input_size())
    throw ShapeError("feature shape " + shape_string(features.shape()) + " does not match model input " +
                     shape_string(arch.input));

  std::size_t block = 0;
  Var h = tape.constant(features);
  switch (arch.kind) {
    case ModelKind::kLogReg:
    case ModelKind::kMlp: {
      h = tape.reshape(h, {batch, arch.input_size()});
      for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
        h = tape.relu(detail::dense_layer(tape, params, layout, block, h));
        if (i + 1 == arch.hidden.size()) h = detail::maybe_dropout(tape, h, arch.dropout, dropout_seed);
      }
      return detail::dense_layer(tape, params, layout, block, h);
    }
    case ModelKind::kCnn: {
      auto [H, W, C] = arch.cnn_input();
      h = tape.reshape(h, {batch, H, W, C});
      for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
        const std::size_t oh = H - arch.kernel + 1, ow = W - arch.kernel + 1, co = arch.conv_channels[i];
        Var cols = tape.im2col(h, arch.kernel, arch.kernel);
        Var z = detail::dense_layer(tape, params, layout, block, cols);
        h = tape.maxpool2(tape.relu(tape.reshape(z, {batch, oh, ow, co})));
        H = oh / 2;
        W = ow / 2;
        C = co;
      }
      h = tape.reshape(h, {batch, H * W * C});
      if (arch.dense > 0) {
        h = tape.relu(detail::dense_layer(tape, params, layout, block, h));
        h = detail::maybe_dropout(tape, h, arch.dropout, dropout_seed);
      }
      return detail::dense_layer(tape, params, layout, block, h);
    }
  }
  throw ConfigError("unknown model kind");
}

/// Mean cross-entropy of a batch, recorded on `tape`.
template <class T>
Var forward_loss(Tape<T>& tape, Var params, const Architecture& arch, const Tensor<double>& features,
                 std::span<const std::size_t> labels, std::optional<std::uint64_t> dropout_seed = std::nullopt) {
  if (labels.empty()) throw DataError("empty batch");
  return tape.softmax_cross_entropy(forward_logits(tape, params, arch, features, dropout_seed), labels);
}

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Accuracy under argmax (lowest index wins ties) and mean cross-entropy.
inline Evaluation evaluate(const ParamVector& params, const Architecture& arch, const Dataset& data,
                           std::size_t chunk = 1024) {
  if (data.empty()) throw DataError("cannot evaluate on an empty dataset");
  if (!(params.layout() == arch.layout())) throw ShapeError("parameter layout does not match architecture");
  std::size_t correct = 0;
  double loss_sum = 0.0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    rows.resize(end - start);
    for (std::size_t i = start; i < end; ++i) rows[i - start] = i;
    const auto labels = data.gather_labels(rows);
    Tape<double> tape;
    const Var p = tape.constant(params.values());
    const Var logits = forward_logits(tape, p, arch, data.gather_features(rows));
    const Var loss = tape.softmax_cross_entropy(logits, labels);
    loss_sum += tape.value(loss)[0] * static_cast<double>(rows.size());
    const auto& z = tape.value(logits);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < arch.classes; ++c)
        if (z(i, c) > z(i, best)) best = c;
      if (best == labels[i]) ++correct;
    }
  }
  return {static_cast<double>(correct) / static_cast<double>(data.size()),
          loss_sum / static_cast<double>(data.size())};
}

/// A model's loss over one client's examples, addressed by local position
/// (0..n_k−1). Holds a reference to `data`; the dataset must outlive it.
class ModelObjective {
 public:
  ModelObjective(Architecture arch, const Dataset& data, std::vector<std::size_t> rows)
      : arch_(std::move(arch)), data_(&data), rows_(std::move(rows)) {}

  /// Every row of `data`.
  ModelObjective(Architecture arch, const Dataset& data)
      : ModelObjective(std::move(arch), data, iota_indices(data.size())) {}

  std::size_t example_count() const noexcept { return rows_.size(); }
  const Architecture& architecture() const noexcept { return arch_; }

  template <class T>
  Var loss(Tape<T>& tape, Var params, std::span<const std::size_t> batch,
           std::optional<std::uint64_t> noise_seed = std::nullopt) const {
    std::vector<std::size_t> rows;
    rows.reserve(batch.size());
    for (std::size_t b : batch) {
      if (b >= rows_.size()) throw DataError("batch position " + std::to_string(b) + " out of range");
      rows.push_back(rows_[b]);
    }
    const auto labels = data_->gather_labels(rows);
    return forward_loss(tape, params, arch_, data_->gather_features(rows), labels, noise_seed);
  }

 private:
  Architecture arch_;
  const Dataset* data_;
  std::vector<std::size_t> rows_;
};

}  // namespace fedmeta
