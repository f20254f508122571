// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedmeta/errors.hpp"
#include "fedmeta/rng.hpp"
#include "fedmeta/tensor.hpp"
#include "json.hpp"

namespace fedmeta {

/// Labeled examples. `features` is [N, ...]; an empty dataset has a
/// default-constructed feature tensor.
struct Dataset {
  Tensor<double> features;
  std::vector<std::size_t> labels;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  Shape example_shape() const {
    const auto& s = features.shape();
    return Shape(s.begin() + 1, s.end());
  }
  std::size_t example_size() const { return empty() ? 0 : features.size() / size(); }

  void validate() const {
    if (empty()) return;
    if (features.rank() < 2 || features.dim(0) != labels.size())
      throw DataError("dataset has " + std::to_string(labels.size()) + " labels but features " +
                      shape_string(features.shape()));
    for (std::size_t y : labels)
      if (y >= classes)
        throw DataError("label " + std::to_string(y) + " out of range for " + std::to_string(classes) + " classes");
  }

  /// Feature rows for the given example indices, shape [rows.size(), ...].
  Tensor<double> gather_features(std::span<const std::size_t> rows) const {
    const std::size_t d = example_size();
    std::vector<double> out(rows.size() * d);
    const auto& src = features.storage();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= size()) throw DataError("example index " + std::to_string(rows[i]) + " out of range");
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                  out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    Shape s = example_shape();
    s.insert(s.begin(), rows.size());
    return Tensor<double>(std::move(s), std::move(out));
  }

  std::vector<std::size_t> gather_labels(std::span<const std::size_t> rows) const {
    std::vector<std::size_t> out;
    out.reserve(rows.size());
    for (std::size_t r : rows) out.push_back(labels.at(r));
    return out;
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset d;
    d.classes = classes;
    if (rows.empty()) return d;
    d.features = gather_features(rows);
    d.labels = gather_labels(rows);
    return d;
  }
};

/// Row-wise concatenation; `b`'s rows follow `a`'s.
inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.example_shape() != b.example_shape() || a.classes != b.classes)
    throw DataError("cannot concatenate datasets with different example shapes or class counts");
  Dataset d;
  d.classes = a.classes;
  std::vector<double> f = a.features.storage();
  f.insert(f.end(), b.features.storage().begin(), b.features.storage().end());
  Shape s = a.example_shape();
  s.insert(s.begin(), a.size() + b.size());
  d.features = Tensor<double>(std::move(s), std::move(f));
  d.labels = a.labels;
  d.labels.insert(d.labels.end(), b.labels.begin(), b.labels.end());
  return d;
}

/// One client's share: indices into a parent dataset.
struct ClientDataset {
  std::size_t client_id = 0;
  std::vector<std::size_t> indices;
  std::size_t size() const noexcept { return indices.size(); }
};

struct Partition {
  std::vector<ClientDataset> clients;
  nlohmann::json spec;
  std::uint64_t seed = 0;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& c : clients) n += c.size();
    return n;
  }
};

inline nlohmann::json partition_manifest(const Partition& p) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& c : p.clients) clients.push_back(c.indices);
  return {{"seed", p.seed}, {"spec", p.spec}, {"clients", std::move(clients)}};
}

inline Partition partition_from_manifest(const nlohmann::json& j) {
  Partition p;
  try {
    p.seed = j.at("seed").get<std::uint64_t>();
    p.spec = j.at("spec");
    std::size_t id = 0;
    for (const auto& c : j.at("clients")) p.clients.push_back({id++, c.get<std::vector<std::size_t>>()});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed partition manifest: ") + e.what());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthSpec {
  std::size_t classes = 10;
  std::size_t dims = 20;
  std::size_t per_class = 100;
  double separation = 3.0;
  /// Class means.
  std::uint64_t seed = 0;
  /// Example noise; separate from `seed` so train/test splits share means.
  std::uint64_t sample_seed = 0;
  /// Domain shift: each class mean moves by `shift` along its own random unit
  /// direction drawn from `shift_seed`.
  double shift = 0.0;
  std::uint64_t shift_seed = 0;
};

namespace detail {
inline std::vector<double> random_unit(Rng& rng, std::size_t dims) {
  std::vector<double> u(dims);
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (auto& x : u) {
      x = standard_normal(rng);
      n2 += x * x;
    }
  } while (n2 == 0.0);
  const double inv = 1.0 / std::sqrt(n2);
  for (auto& x : u) x *= inv;
  return u;
}
}  // namespace detail

/// Gaussian blobs with unit covariance, one mean per class on the sphere of
/// radius `separation`. Examples are stored class-major.
inline Dataset synth_classification(const SynthSpec& spec) {
  if (spec.classes == 0 || spec.dims == 0 || spec.per_class == 0)
    throw ConfigError("synthetic dataset counts must be positive");
  Rng mean_rng(derive_seed(spec.seed, {0x6d65616e}));
  Rng shift_rng(derive_seed(spec.shift_seed, {0x7368}));
  Rng sample_rng(derive_seed(spec.sample_seed, {0x73616d70}));

  std::vector<std::vector<double>> means;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    auto m = detail::random_unit(mean_rng, spec.dims);
    for (auto& x : m) x *= spec.separation;
    means.push_back(std::move(m));
  }
  if (spec.shift != 0.0)
    for (auto& m : means) {
      const auto u = detail::random_unit(shift_rng, spec.dims);
      for (std::size_t i = 0; i < spec.dims; ++i) m[i] += spec.shift * u[i];
    }

  Dataset d;
  d.classes = spec.classes;
  const std::size_t n = spec.classes * spec.per_class;
  std::vector<double> f;
  f.reserve(n * spec.dims);
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      for (std::size_t k = 0; k < spec.dims; ++k) f.push_back(means[c][k] + standard_normal(sample_rng));
      d.labels.push_back(c);
    }
  d.features = Tensor<double>({n, spec.dims}, std::move(f));
  return d;
}

inline Dataset synth_classification(std::size_t classes, std::size_t dims, std::size_t per_class, double separation,
                                    std::uint64_t seed) {
  return synth_classification(SynthSpec{classes, dims, per_class, separation, seed, seed, 0.0, 0});
}

// ---------------------------------------------------------------------------
// Partitioning

namespace detail {
/// Splits `items` into `parts` contiguous runs; the first `size % parts` runs get one extra.
inline std::vector<std::vector<std::size_t>> split_even(const std::vector<std::size_t>& items, std::size_t parts) {
  std::vector<std::vector<std::size_t>> out(parts);
  const std::size_t base = items.size() / parts, extra = items.size() % parts;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < parts; ++k) {
    const std::size_t len = base + (k < extra ? 1 : 0);
    out[k].assign(items.begin() + static_cast<std::ptrdiff_t>(pos),
                  items.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return out;
}
}  // namespace detail

inline Partition partition_iid(std::size_t n_examples, std::size_t clients, std::uint64_t seed) {
  if (clients == 0) throw ConfigError("client count must be positive");
  if (clients > n_examples)
    throw ConfigError("cannot split " + std::to_string(n_examples) + " examples over " + std::to_string(clients) +
                      " clients");
  const auto order = shuffled_indices(n_examples, derive_seed(seed, {0x696964}));
  auto shards = detail::split_even(order, clients);
  Partition p;
  p.seed = seed;
  p.spec = {{"scheme", "iid"}, {"clients", clients}};
  for (std::size_t k = 0; k < clients; ++k) {
    std::sort(shards[k].begin(), shards[k].end());
    p.clients.push_back({k, std::move(shards[k])});
  }
  return p;
}

inline Partition partition_iid(const Dataset& data, std::size_t clients, std::uint64_t seed) {
  return partition_iid(data.size(), clients, seed);
}

/// Label-skew split. Client k owns `classes_per_client` consecutive entries of a
/// seeded class permutation (wrapping), and every class is cut into as many
/// shards as there are client slots referring to it.
inline Partition partition_label_skew(const Dataset& data, std::size_t clients, std::size_t classes_per_client,
                                      std::uint64_t seed) {
  const std::size_t C = data.classes;
  if (clients == 0) throw ConfigError("client count must be positive");
  if (classes_per_client == 0 || classes_per_client > C)
    throw ConfigError("classes per client must be in [1, " + std::to_string(C) + "], got " +
                      std::to_string(classes_per_client));
  if (clients * classes_per_client < C)
    throw DataError("infeasible shard counts: " + std::to_string(clients) + " clients x " +
                    std::to_string(classes_per_client) + " classes leave some of the " + std::to_string(C) +
                    " classes unassigned");

  Rng rng(derive_seed(seed, {0x736b6577}));
  auto class_order = iota_indices(C);
  shuffle(class_order, rng);

  // slot (k, j) -> class
  std::vector<std::size_t> slot_class(clients * classes_per_client);
  std::vector<std::size_t> shards_per_class(C, 0);
  for (std::size_t s = 0; s < slot_class.size(); ++s) {
    slot_class[s] = class_order[s % C];
    ++shards_per_class[slot_class[s]];
  }

  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);

  std::vector<std::vector<std::vector<std::size_t>>> shards(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (by_class[c].size() < shards_per_class[c])
      throw DataError("infeasible shard counts: class " + std::to_string(c) + " has " +
                      std::to_string(by_class[c].size()) + " examples for " + std::to_string(shards_per_class[c]) +
                      " shards");
    shuffle(by_class[c], rng);
    shards[c] = detail::split_even(by_class[c], shards_per_class[c]);
  }

  Partition p;
  p.seed = seed;
  p.spec = {{"scheme", "label-skew"}, {"clients", clients}, {"classes_per_client", classes_per_client}};
  std::vector<std::size_t> next_shard(C, 0);
  for (std::size_t k = 0; k < clients; ++k) {
    ClientDataset cd{k, {}};
    for (std::size_t j = 0; j < classes_per_client; ++j) {
      const std::size_t c = slot_class[k * classes_per_client + j];
      const auto& shard = shards[c][next_shard[c]++];
      cd.indices.insert(cd.indices.end(), shard.begin(), shard.end());
    }
    std::sort(cd.indices.begin(), cd.indices.end());
    p.clients.push_back(std::move(cd));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Server-side samples

struct MetaSplit {
  Dataset meta;
  Dataset remainder;
  std::vector<std::size_t> meta_rows;
  std::vector<std::size_t> remainder_rows;
};

/// Uniform sample of round(fraction·N) examples without replacement.
inline MetaSplit sample_meta_set(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("meta fraction must be in (0, 1)");
  const std::size_t m = round_count(fraction * static_cast<double>(data.size()));
  if (m == 0)
    throw DataError("meta sample of fraction " + std::to_string(fraction) + " from " + std::to_string(data.size()) +
                    " examples would be empty");
  auto order = shuffled_indices(data.size(), derive_seed(seed, {0x6d657461}));
  MetaSplit s;
  s.meta_rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m));
  s.remainder_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(m), order.end());
  std::sort(s.meta_rows.begin(), s.meta_rows.end());
  std::sort(s.remainder_rows.begin(), s.remainder_rows.end());
  s.meta = data.subset(s.meta_rows);
  s.remainder = data.subset(s.remainder_rows);
  return s;
}

struct MetaOrigin {
  bool primary = false;
  std::size_t client_id = 0;
  std::size_t row = 0;
};

struct OverlapMeta {
  Dataset data;
  std::vector<MetaOrigin> origin;
  std::size_t primary_clients = 0;
  std::size_t auxiliary_clients = 0;
};

/// Meta set whose source clients are round(overlap_rate·source_clients) picks
/// from the training partition and the rest from an auxiliary partition; a
/// `fraction` of the pooled examples is then sampled.
inline OverlapMeta build_overlap_meta(const Dataset& primary_data, const Partition& primary, const Dataset& aux_data,
                                      const Partition& auxiliary, double overlap_rate, double fraction,
                                      std::size_t source_clients, std::uint64_t seed) {
  if (!(overlap_rate >= 0.0 && overlap_rate <= 1.0)) throw ConfigError("overlap rate must be in [0, 1]");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("meta fraction must be in (0, 1]");
  if (source_clients == 0) throw ConfigError("meta source-client count must be positive");
  const std::size_t from_primary = round_count(overlap_rate * static_cast<double>(source_clients));
  const std::size_t from_aux = source_clients - from_primary;
  if (from_primary > primary.clients.size() || from_aux > auxiliary.clients.size())
    throw DataError("insufficient clients: need " + std::to_string(from_primary) + " primary and " +
                    std::to_string(from_aux) + " auxiliary");

  Rng rng(derive_seed(seed, {0x6f766c70}));
  auto pick = [&rng](const Partition& p, std::size_t count) {
    auto ids = iota_indices(p.clients.size());
    shuffle(ids, rng);
    ids.resize(count);
    std::sort(ids.begin(), ids.end());
    return ids;
  };
  std::vector<MetaOrigin> pool;
  for (std::size_t k : pick(primary, from_primary))
    for (std::size_t r : primary.clients[k].indices) pool.push_back({true, primary.clients[k].client_id, r});
  for (std::size_t k : pick(auxiliary, from_aux))
    for (std::size_t r : auxiliary.clients[k].indices) pool.push_back({false, auxiliary.clients[k].client_id, r});

  const std::size_t m = round_count(fraction * static_cast<double>(pool.size()));
  if (m == 0) throw DataError("overlap meta sample would be empty");
  shuffle(pool, rng);
  pool.resize(m);

  OverlapMeta out;
  out.primary_clients = from_primary;
  out.auxiliary_clients = from_aux;
  std::vector<std::size_t> prow, arow;
  for (const auto& o : pool) (o.primary ? prow : arow).push_back(o.row);
  out.data = concat(primary_data.subset(prow), aux_data.subset(arow));
  // Reorder origins to match the concatenated rows.
  std::stable_partition(pool.begin(), pool.end(), [](const MetaOrigin& o) { return o.primary; });
  out.origin = std::move(pool);
  return out;
}

}  // namespace fedmeta
