// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0
//
// IDX (MNIST-family) reader. Layout: 4-byte big-endian magic 0x000008DD where
// 08 = unsigned byte payload and DD = dimension count, then DD big-endian
// uint32 extents, then the raw bytes.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fedmeta/datasets.hpp"
#include "fedmeta/errors.hpp"

namespace fedmeta {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t pos, const std::string& path) {
  if (pos + 4 > b.size()) throw DataError(path + ": truncated IDX header");
  return (std::uint32_t{b[pos]} << 24) | (std::uint32_t{b[pos + 1]} << 16) | (std::uint32_t{b[pos + 2]} << 8) |
         std::uint32_t{b[pos + 3]};
}

struct IdxPayload {
  std::vector<std::size_t> dims;
  std::vector<unsigned char> bytes;
};

inline IdxPayload parse_idx(const std::vector<unsigned char>& b, std::uint32_t expected_magic,
                            const std::string& path) {
  const std::uint32_t magic = read_be32(b, 0, path);
  if (magic != expected_magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, ": bad magic 0x%08X (expected 0x%08X)", magic, expected_magic);
    throw DataError(path + buf);
  }
  IdxPayload p;
  const std::size_t ndims = magic & 0xFF;
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    p.dims.push_back(read_be32(b, 4 + 4 * i, path));
    count *= p.dims.back();
  }
  const std::size_t header = 4 + 4 * ndims;
  if (b.size() < header + count)
    throw DataError(path + ": truncated IDX payload (" + std::to_string(b.size() - header) + " of " +
                    std::to_string(count) + " bytes)");
  p.bytes.assign(b.begin() + static_cast<std::ptrdiff_t>(header),
                 b.begin() + static_cast<std::ptrdiff_t>(header + count));
  return p;
}

}  // namespace detail

/// Loads an image/label file pair. Pixels are scaled to [0, 1]; features are
/// [N, rows, cols]. `classes == 0` infers max label + 1.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes = 0) {
  const auto images = detail::parse_idx(detail::read_all(images_path), kIdxImagesMagic, images_path);
  const auto labels = detail::parse_idx(detail::read_all(labels_path), kIdxLabelsMagic, labels_path);
  if (images.dims[0] != labels.dims[0])
    throw DataError("count mismatch: " + std::to_string(images.dims[0]) + " images vs " +
                    std::to_string(labels.dims[0]) + " labels");
  if (images.dims[0] == 0 || images.dims[1] == 0 || images.dims[2] == 0) throw DataError(images_path + ": empty IDX file");

  Dataset d;
  std::vector<double> f(images.bytes.size());
  std::transform(images.bytes.begin(), images.bytes.end(), f.begin(),
                 [](unsigned char px) { return static_cast<double>(px) / 255.0; });
  d.features = Tensor<double>({images.dims[0], images.dims[1], images.dims[2]}, std::move(f));
  d.labels.assign(labels.bytes.begin(), labels.bytes.end());
  const std::size_t inferred = d.labels.empty() ? 0 : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  d.classes = classes ? classes : inferred;
  d.validate();
  return d;
}

}  // namespace fedmeta
