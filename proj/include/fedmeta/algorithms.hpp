// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0
//
// Client update procedures and server-side aggregation.
//
// All client procedures are pure functions of (objective, ω_t, schedule,
// seed). Local SGD and keep-trace descent draw the same per-epoch shuffles
// for the same seed, so FedAvg and UGA clients walk identical batch sequences.

#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedmeta/autodiff.hpp"
#include "fedmeta/datasets.hpp"
#include "fedmeta/dual.hpp"
#include "fedmeta/errors.hpp"
#include "fedmeta/params.hpp"
#include "fedmeta/rng.hpp"
#include "fedmeta/tape.hpp"

namespace fedmeta {

/// A per-client loss: mean loss over a batch of local example positions,
/// recordable on both plain and dual tapes. `noise_seed` drives stochastic
/// layers and is replayed verbatim by the adjoint pass.
template <class O>
concept Objective = requires(const O& o, Tape<double>& plain, Tape<Dual>& dual, Var p,
                             std::span<const std::size_t> batch, std::optional<std::uint64_t> noise_seed) {
  { o.example_count() } -> std::convertible_to<std::size_t>;
  { o.loss(plain, p, batch, noise_seed) } -> std::same_as<Var>;
  { o.loss(dual, p, batch, noise_seed) } -> std::same_as<Var>;
};

inline constexpr std::size_t kFullBatch = std::numeric_limits<std::size_t>::max();

struct LocalSchedule {
  std::size_t epochs = 1;
  /// `kFullBatch` (or anything ≥ n_k) means one batch per epoch.
  std::size_t batch_size = kFullBatch;
  double lr = 0.0;
};

struct ProxSpec {
  double mu = 0.0;
};

/// Replay record of one local step.
struct TraceStep {
  ParamVector params_before;
  std::vector<std::size_t> batch;
  double step_lr = 0.0;
  std::uint64_t noise_seed = 0;
};

enum class PayloadKind { kParams, kGradient };

struct ClientUpdateResult {
  std::size_t client_id = 0;
  std::size_t n_k = 0;
  PayloadKind kind = PayloadKind::kParams;
  ParamVector payload;
};

/// Batches of one epoch: a seeded shuffle of 0..n−1 cut into runs of `batch_size`.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           std::size_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  const auto order = shuffled_indices(n, derive_seed(seed, {0x65706f63, epoch}));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += std::min(batch_size, n - start))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(start + std::min(batch_size, n - start)));
  return out;
}

inline std::uint64_t step_noise_seed(std::uint64_t seed, std::size_t epoch, std::size_t step) {
  return derive_seed(seed, {0x6e6f6973, epoch, step});
}

struct LossAndGradient {
  double loss = 0.0;
  ParamVector grad;
};

template <Objective O>
LossAndGradient batch_gradient(const O& objective, const ParamVector& params, std::span<const std::size_t> batch,
                               std::optional<std::uint64_t> noise_seed = std::nullopt) {
  auto r = value_and_grad([&](auto& tape, Var p) { return objective.loss(tape, p, batch, noise_seed); },
                          params.values());
  if (!is_finite(r.value) || !all_finite(r.grad)) throw NumericError("non-finite loss or gradient");
  return {r.value, ParamVector(params.layout(), std::move(r.grad))};
}

template <Objective O>
ParamVector batch_hvp(const O& objective, const ParamVector& params, std::span<const std::size_t> batch,
                      std::optional<std::uint64_t> noise_seed, const ParamVector& v) {
  auto hv = hvp([&](auto& tape, Var p) { return objective.loss(tape, p, batch, noise_seed); }, params, v);
  require_finite(hv.values(), "Hessian-vector product");
  return hv;
}

/// Loss and gradient over every example of the objective in one batch.
template <Objective O>
LossAndGradient full_gradient(const O& objective, const ParamVector& params) {
  if (objective.example_count() == 0) throw DataError("empty client dataset");
  const auto all = iota_indices(objective.example_count());
  return batch_gradient(objective, params, all);
}

template <Objective O>
double full_loss(const O& objective, const ParamVector& params) {
  if (objective.example_count() == 0) throw DataError("empty client dataset");
  const auto all = iota_indices(objective.example_count());
  Tape<double> tape;
  const Var p = tape.constant(params.values());
  return tape.value(objective.loss(tape, p, all, std::nullopt))[0];
}

struct LocalTrajectory {
  std::vector<TraceStep> steps;  // empty unless recorded
  ParamVector final_params;
};

/// Mini-batch SGD from `start`. With `prox`, each step descends
/// ∇ℓ + μ(ω − start). With `record`, a TraceStep is kept per step.
template <Objective O>
LocalTrajectory local_descent(const O& objective, const ParamVector& start, std::size_t epochs,
                              std::size_t batch_size, double lr, std::uint64_t seed,
                              std::optional<ProxSpec> prox = std::nullopt, bool record = false) {
  if (objective.example_count() == 0) throw DataError("empty client dataset");
  if (prox && prox->mu < 0.0) throw ConfigError("proximal coefficient must be non-negative");
  LocalTrajectory t{{}, start};
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto batches = epoch_batches(objective.example_count(), batch_size, seed, e);
    for (std::size_t s = 0; s < batches.size(); ++s) {
      const std::uint64_t noise = step_noise_seed(seed, e, s);
      auto g = batch_gradient(objective, t.final_params, batches[s], noise).grad;
      if (prox && prox->mu != 0.0) {
        axpy(prox->mu, t.final_params, g);
        axpy(-prox->mu, start, g);
      }
      if (record) t.steps.push_back({t.final_params, batches[s], lr, noise});
      axpy(-lr, g, t.final_params);
    }
  }
  return t;
}

/// FedAvg / FedProx local training: E epochs of SGD, returns updated params.
template <Objective O>
ClientUpdateResult client_update_sgd(const O& objective, std::size_t client_id, const ParamVector& global,
                                     const LocalSchedule& schedule, std::optional<ProxSpec> prox,
                                     std::uint64_t seed) {
  if (schedule.epochs < 1) throw ConfigError("local epochs must be at least 1");
  auto t = local_descent(objective, global, schedule.epochs, schedule.batch_size, schedule.lr, seed, prox);
  return {client_id, objective.example_count(), PayloadKind::kParams, std::move(t.final_params)};
}

/// Gradient of L(h(ω); D_k) with respect to ω, where h is the trajectory whose
/// steps are recorded in `trace`: the full-batch gradient at the end of the
/// trajectory pulled back through each step's Jacobian I − η·H_i.
template <Objective O>
ParamVector unrolled_gradient(const O& objective, const std::vector<TraceStep>& trace, const ParamVector& final_params) {
  ParamVector v = full_gradient(objective, final_params).grad;
  for (auto it = trace.rbegin(); it != trace.rend(); ++it) {
    if (it->batch.empty()) throw DataError("trace step with empty batch");
    const ParamVector hv = batch_hvp(objective, it->params_before, it->batch, it->noise_seed, v);
    axpy(-it->step_lr, hv, v);
  }
  return v;
}

/// UGA client: keep-trace descent for the first E−1 epochs, then the gradient
/// of the whole-client loss at the result with respect to ω_t.
template <Objective O>
ClientUpdateResult client_update_uga(const O& objective, std::size_t client_id, const ParamVector& global,
                                     const LocalSchedule& schedule, std::uint64_t seed) {
  if (schedule.epochs < 2) throw ConfigError("UGA needs at least 2 local epochs (E-1 descent + 1 evaluation)");
  auto t = local_descent(objective, global, schedule.epochs - 1, schedule.batch_size, schedule.lr, seed,
                         std::nullopt, /*record=*/true);
  return {client_id, objective.example_count(), PayloadKind::kGradient,
          unrolled_gradient(objective, t.steps, t.final_params)};
}

namespace detail {

inline std::vector<const ClientUpdateResult*> canonical_order(std::span<const ClientUpdateResult> results,
                                                              PayloadKind kind, std::size_t& total) {
  if (results.empty()) throw DataError("no client results to aggregate");
  std::vector<const ClientUpdateResult*> order;
  total = 0;
  for (const auto& r : results) {
    if (r.kind != kind)
      throw ConfigError(kind == PayloadKind::kParams ? "expected parameter payloads" : "expected gradient payloads");
    require_same_layout(r.payload, results.front().payload);
    total += r.n_k;
    order.push_back(&r);
  }
  if (total == 0) throw DataError("aggregated clients hold no examples");
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (order[i]->client_id == order[i - 1]->client_id)
      throw DataError("duplicate client id " + std::to_string(order[i]->client_id));
  return order;
}

}  // namespace detail

/// ω_{t+1} = ω_t − η_g Σ_k (n_k / n_S) g_k, summed in ascending client id.
inline ParamVector aggregate_gradients(const ParamVector& global, std::span<const ClientUpdateResult> results,
                                       double global_lr) {
  std::size_t total = 0;
  const auto order = detail::canonical_order(results, PayloadKind::kGradient, total);
  require_same_layout(global, order.front()->payload);
  ParamVector g = ParamVector::zeros(global.layout());
  for (const auto* r : order) axpy(static_cast<double>(r->n_k) / static_cast<double>(total), r->payload, g);
  ParamVector next = global;
  axpy(-global_lr, g, next);
  return next;
}

/// Σ_k (n_k / n) ω_k, summed in ascending client id.
inline ParamVector aggregate_params(std::span<const ClientUpdateResult> results) {
  std::size_t total = 0;
  const auto order = detail::canonical_order(results, PayloadKind::kParams, total);
  // Averaging offsets from the first payload keeps agreeing clients exact.
  const ParamVector& base = order.front()->payload;
  ParamVector out = base;
  for (std::size_t i = 1; i < order.size(); ++i)
    axpy(static_cast<double>(order[i]->n_k) / static_cast<double>(total), order[i]->payload - base, out);
  return out;
}

struct MetaStep {
  ParamVector params;
  double loss_before = 0.0;
  double loss_after = 0.0;
};

/// `steps` full-batch gradient steps on the server's meta set.
template <Objective O>
MetaStep meta_update_report(const ParamVector& params, const O& meta, double meta_lr, std::size_t steps = 1) {
  if (meta.example_count() == 0) throw DataError("empty meta set");
  if (steps < 1) throw ConfigError("meta steps must be at least 1");
  MetaStep out{params, 0.0, 0.0};
  for (std::size_t s = 0; s < steps; ++s) {
    auto lg = full_gradient(meta, out.params);
    if (s == 0) out.loss_before = lg.loss;
    axpy(-meta_lr, lg.grad, out.params);
  }
  out.loss_after = full_loss(meta, out.params);
  return out;
}

template <Objective O>
ParamVector meta_update(const ParamVector& params, const O& meta, double meta_lr, std::size_t steps = 1) {
  return meta_update_report(params, meta, meta_lr, steps).params;
}

struct SharedData {
  Dataset data;
  Partition partition;
};

/// One-time FedShare distribution: the share examples are appended to the
/// parent dataset (rows N..N+S−1) and dealt out uniformly, the first S mod K
/// clients receiving one extra.
inline SharedData apply_fedshare(const Dataset& data, const Partition& partition, const Dataset& share,
                                 std::uint64_t seed) {
  if (share.empty()) throw DataError("share set is empty");
  if (partition.clients.empty()) throw DataError("partition has no clients");
  for (const auto& c : partition.clients)
    if (c.size() == 0) throw DataError("client " + std::to_string(c.client_id) + " is empty");
  SharedData out{concat(data, share), partition};
  std::vector<std::size_t> rows(share.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = data.size() + i;
  Rng rng(derive_seed(seed, {0x73686172}));
  shuffle(rows, rng);
  const auto portions = detail::split_even(rows, out.partition.clients.size());
  for (std::size_t k = 0; k < portions.size(); ++k) {
    auto& idx = out.partition.clients[k].indices;
    idx.insert(idx.end(), portions[k].begin(), portions[k].end());
    std::sort(idx.begin(), idx.end());
  }
  out.partition.spec["fedshare"] = share.size();
  return out;
}

}  // namespace fedmeta
