// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0
//
// Embedded oracle suite behind `fedmeta selftest`: each analytic derivative
// path is compared against an independent finite-difference or algebraic
// reference on a small synthetic problem.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <string>
#include <vector>

#include "fedmeta/algorithms.hpp"
#include "fedmeta/autodiff.hpp"
#include "fedmeta/datasets.hpp"
#include "fedmeta/models.hpp"
#include "fedmeta/oracles.hpp"

namespace fedmeta {

struct SelftestOptions {
  /// Relative perturbation applied to the UGA gradient before it is checked.
  /// Non-zero only to prove the check can fail.
  double uga_perturbation = 0.0;
  std::size_t uga_directions = 10;
};

struct SelftestCheck {
  std::string name;
  bool passed = false;
  double error = 0.0;
  double tolerance = 0.0;
};

struct SelftestReport {
  std::vector<SelftestCheck> checks;
  bool all_passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return true;
  }
};

namespace detail {

inline Tensor<double> random_direction(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> d({n});
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = standard_normal(rng);
    s += d[i] * d[i];
  }
  for (std::size_t i = 0; i < n; ++i) d[i] /= std::sqrt(s);
  return d;
}

}  // namespace detail

inline SelftestReport run_selftest(const SelftestOptions& opts = {}) {
  SelftestReport report;
  auto record = [&](const char* name, double err, double tol) {
    report.checks.push_back({name, err <= tol, err, tol});
  };

  const Dataset data = synth_classification(4, 20, 16, 2.0, 11);
  const Architecture arch = Architecture::mlp(20, {16}, 4);
  const ParamVector w0 = init_params(arch, 5);
  const ModelObjective whole(arch, data);
  const auto all = iota_indices(data.size());

  // Reverse-mode gradient vs central differences.
  {
    auto f = [&](const Tensor<double>& th) { return full_loss(whole, ParamVector(w0.layout(), th)); };
    const auto fd = oracle::fd_gradient(f, w0.values(), 1e-5);
    const auto g = full_gradient(whole, w0).grad;
    record("gradient-vs-finite-difference", oracle::relative_l2_error(g.values(), fd), 1e-6);
  }

  // Forward-over-reverse HVP vs differences of gradients.
  {
    const auto v = detail::random_direction(w0.size(), 21);
    const std::vector<std::size_t> batch(all.begin(), all.begin() + 16);
    auto grad = [&](const Tensor<double>& th) {
      return batch_gradient(whole, ParamVector(w0.layout(), th), batch).grad.values();
    };
    const auto fd = oracle::fd_hvp(grad, w0.values(), v, 1e-4);
    const auto hv = batch_hvp(whole, w0, batch, std::nullopt, ParamVector(w0.layout(), v));
    record("hvp-vs-gradient-difference", oracle::relative_l2_error(hv.values(), fd), 1e-5);
  }

  // UGA gradient vs directional differences of ω ↦ L(h(ω); D_k).
  {
    const LocalSchedule sched{3, 16, 0.1};
    const std::uint64_t seed = 99;
    ParamVector g = client_update_uga(whole, 0, w0, sched, seed).payload;
    if (opts.uga_perturbation != 0.0) g = (1.0 + opts.uga_perturbation) * g;
    auto unrolled = [&](const Tensor<double>& th) {
      const auto t = local_descent(whole, ParamVector(w0.layout(), th), sched.epochs - 1, sched.batch_size, sched.lr,
                                   seed);
      return full_loss(whole, t.final_params);
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < opts.uga_directions; ++i) {
      const auto d = detail::random_direction(w0.size(), 1000 + i);
      const double fd = oracle::fd_directional(unrolled, w0.values(), d, 1e-5);
      worst = std::max(worst, oracle::relative_error(dot(g, ParamVector(w0.layout(), d)), fd));
    }
    record("uga-vs-unrolled-finite-difference", worst, 1e-5);
  }

  // One-step unbiasedness: n_k-weighted client gradients equal the central gradient.
  {
    const Partition part = partition_label_skew(data, 4, 1, 3);
    std::vector<ClientUpdateResult> results;
    for (const auto& c : part.clients) {
      const ModelObjective obj(arch, data, c.indices);
      results.push_back({c.client_id, c.size(), PayloadKind::kGradient, full_gradient(obj, w0).grad});
    }
    // ω − 1·Σ w_k g_k recovers −Σ w_k g_k relative to ω.
    const ParamVector aggregated = w0 - aggregate_gradients(w0, results, 1.0);
    const ParamVector central = full_gradient(whole, w0).grad;
    record("one-step-unbiased-aggregation", max_abs_diff(aggregated, central), 1e-10);

    // FedAvg of one full-batch local step equals the gradient-form update.
    const double lr = 0.05;
    std::vector<ClientUpdateResult> stepped;
    for (const auto& c : part.clients) {
      const ModelObjective obj(arch, data, c.indices);
      stepped.push_back(client_update_sgd(obj, c.client_id, w0, {1, kFullBatch, lr}, std::nullopt, 7));
    }
    record("fedavg-one-step-equivalence",
           max_abs_diff(aggregate_params(stepped), aggregate_gradients(w0, results, lr)), 1e-12);
  }
  return report;
}

}  // namespace fedmeta
