// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0
//
// Server loop: client selection, learning-rate schedule, algorithm dispatch,
// aggregation, optional meta update, and evaluation.

#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedmeta/algorithms.hpp"
#include "fedmeta/datasets.hpp"
#include "fedmeta/errors.hpp"
#include "fedmeta/idx.hpp"
#include "fedmeta/models.hpp"
#include "fedmeta/params.hpp"
#include "fedmeta/rng.hpp"

namespace fedmeta {

enum class Algorithm { kFedAvg, kFedProx, kFedShare, kUga, kFedMeta, kFedMetaUga };

enum class ClientRule { kSgd, kSgdProx, kUga };
enum class AggregationRule { kParams, kGradients };

/// What one algorithm does in a round.
struct AlgorithmTraits {
  ClientRule client;
  AggregationRule aggregation;
  bool meta_update;
  bool shares_data;
};

constexpr AlgorithmTraits traits(Algorithm a) {
  switch (a) {
    case Algorithm::kFedAvg:
      return {ClientRule::kSgd, AggregationRule::kParams, false, false};
    case Algorithm::kFedProx:
      return {ClientRule::kSgdProx, AggregationRule::kParams, false, false};
    case Algorithm::kFedShare:
      return {ClientRule::kSgd, AggregationRule::kParams, false, true};
    case Algorithm::kUga:
      return {ClientRule::kUga, AggregationRule::kGradients, false, false};
    case Algorithm::kFedMeta:
      return {ClientRule::kSgd, AggregationRule::kParams, true, false};
    case Algorithm::kFedMetaUga:
      return {ClientRule::kUga, AggregationRule::kGradients, true, false};
  }
  return {ClientRule::kSgd, AggregationRule::kParams, false, false};
}

inline constexpr Algorithm kAllAlgorithms[] = {Algorithm::kFedAvg, Algorithm::kFedProx, Algorithm::kFedShare,
                                               Algorithm::kUga,    Algorithm::kFedMeta, Algorithm::kFedMetaUga};

inline const char* algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::kFedAvg:
      return "fedavg";
    case Algorithm::kFedProx:
      return "fedprox";
    case Algorithm::kFedShare:
      return "fedshare";
    case Algorithm::kUga:
      return "uga";
    case Algorithm::kFedMeta:
      return "fedmeta";
    case Algorithm::kFedMetaUga:
      return "fedmeta_uga";
  }
  return "?";
}

inline Algorithm parse_algorithm(const std::string& s) {
  for (Algorithm a : kAllAlgorithms)
    if (s == algorithm_name(a)) return a;
  throw ConfigError("unknown algorithm '" + s + "'");
}

// ---------------------------------------------------------------------------
// Configuration

struct SyntheticDataSpec {
  std::size_t classes = 10;
  std::size_t dims = 20;
  std::size_t per_class = 200;
  std::size_t test_per_class = 100;
  double separation = 3.0;
  std::uint64_t seed = 0;
};

struct IdxDataSpec {
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t classes = 0;
};

struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | idx
  SyntheticDataSpec synthetic;
  IdxDataSpec idx;
};

struct PartitionSpec {
  std::string scheme = "iid";  // iid | label-skew
  std::size_t classes_per_client = 2;
};

/// Server-held sample. `source = "iid"` draws `fraction` of the training set;
/// `source = "overlap"` mixes training clients with an auxiliary, shifted
/// client pool (synthetic data only).
struct MetaSpec {
  double fraction = 0.01;
  std::string source = "iid";  // iid | overlap
  double overlap_rate = 1.0;
  std::size_t source_clients = 8;
  std::size_t aux_clients = 20;
  double aux_shift = 0.0;
  /// "global" evaluates on the held-out test split; "meta" on held-out data
  /// drawn from the same sources as the meta set.
  std::string test_source = "global";
};

struct Seeds {
  std::uint64_t partition = 0;
  std::uint64_t init = 0;
  std::uint64_t training = 0;
};

struct RunConfig {
  Algorithm algorithm = Algorithm::kFedAvg;
  std::size_t clients = 10;
  double client_fraction = 0.1;
  std::size_t local_epochs = 1;
  std::size_t batch_size = kFullBatch;
  double lr = 0.01;
  /// η_g; defaults to the client η of the round.
  std::optional<double> lr_global;
  /// η_meta; defaults to the client η of the round.
  std::optional<double> lr_meta;
  double lr_decay = 1.0;
  /// Whether explicit η_g / η_meta decay with the same per-round factor.
  bool decay_server_lrs = true;
  /// Linear scaling rule: when set, lr is multiplied by batch_size / reference.
  std::optional<std::size_t> lr_reference_batch;
  double prox_mu = 2e-4;
  std::size_t rounds = 1;
  std::size_t eval_every = 1;
  std::size_t meta_steps = 1;
  Seeds seeds;
  Architecture model;
  DatasetSpec dataset;
  PartitionSpec partition;
  MetaSpec meta;
  bool record_wall_time = true;

  void validate() const {
    if (clients < 1) throw ConfigError("clients must be at least 1");
    if (!(client_fraction > 0.0 && client_fraction <= 1.0)) throw ConfigError("client_fraction must be in (0, 1]");
    if (local_epochs < 1) throw ConfigError("local_epochs must be at least 1");
    if (traits(algorithm).client == ClientRule::kUga && local_epochs < 2)
      throw ConfigError("uga-family algorithms need local_epochs >= 2");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
    if (lr_global && !(*lr_global >= 0.0)) throw ConfigError("lr_global must be non-negative");
    if (lr_meta && !(*lr_meta >= 0.0)) throw ConfigError("lr_meta must be non-negative");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
    if (lr_reference_batch && *lr_reference_batch < 1) throw ConfigError("lr_reference_batch must be at least 1");
    if (lr_reference_batch && batch_size == kFullBatch)
      throw ConfigError("linear scaling needs a finite batch_size");
    if (!(prox_mu >= 0.0)) throw ConfigError("prox_mu must be non-negative");
    if (rounds < 1) throw ConfigError("rounds must be at least 1");
    if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
    if (meta_steps < 1) throw ConfigError("meta_steps must be at least 1");
    if (partition.scheme != "iid" && partition.scheme != "label-skew")
      throw ConfigError("partition scheme must be iid or label-skew");
    if (dataset.kind != "synthetic" && dataset.kind != "idx") throw ConfigError("dataset kind must be synthetic or idx");
    if (meta.source != "iid" && meta.source != "overlap") throw ConfigError("meta source must be iid or overlap");
    if (meta.test_source != "global" && meta.test_source != "meta")
      throw ConfigError("meta test_source must be global or meta");
    if (meta.source == "overlap" && dataset.kind != "synthetic")
      throw ConfigError("overlap meta sets need a synthetic dataset");
    if (!(meta.overlap_rate >= 0.0 && meta.overlap_rate <= 1.0)) throw ConfigError("overlap_rate must be in [0, 1]");
    if (!(meta.fraction > 0.0 && meta.fraction <= 1.0)) throw ConfigError("meta fraction must be in (0, 1]");
    if (meta.source == "iid" && meta.fraction >= 1.0) throw ConfigError("iid meta fraction must be below 1");
  }
};

// ---------------------------------------------------------------------------
// Schedule primitives

/// m = max(⌈C·K⌉, 1) distinct ids drawn uniformly, returned ascending.
inline std::vector<std::size_t> select_clients(std::size_t clients, double fraction, Rng& rng) {
  if (clients < 1) throw ConfigError("clients must be at least 1");
  // The small slack keeps products like 0.3·10 = 3.0000000000000004 from rounding up.
  const double want = std::ceil(fraction * static_cast<double>(clients) - 1e-9);
  const std::size_t m = std::min(clients, std::max<std::size_t>(1, want > 0 ? static_cast<std::size_t>(want) : 0));
  auto ids = iota_indices(clients);
  for (std::size_t i = 0; i < m; ++i) std::swap(ids[i], ids[i + uniform_index(rng, clients - i)]);
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline double lr_at(double base, double decay, std::size_t round) {
  return base * std::pow(decay, static_cast<double>(round));
}

/// Linear scaling rule.
inline double scaled_lr(double base, std::size_t batch, std::size_t reference = 64) {
  if (batch < 1 || reference < 1) throw ConfigError("batch sizes must be at least 1");
  return base * static_cast<double>(batch) / static_cast<double>(reference);
}

// ---------------------------------------------------------------------------
// Environment

/// Everything a run consumes besides the hyperparameters. Built once; shared
/// read-only by all client updates.
struct Environment {
  Architecture arch;
  Dataset train;  // parent dataset of `partition` (FedShare rows appended)
  Partition partition;
  Dataset test;
  Dataset meta;   // empty when the algorithm has no server-side set
  std::size_t base_train_size = 0;
};

inline Architecture bind_architecture(Architecture arch, const Dataset& data) {
  const Shape ex = data.example_shape();
  arch.classes = data.classes;
  arch.input = arch.kind == ModelKind::kCnn ? ex : Shape{shape_size(ex)};
  arch.layout();
  return arch;
}

namespace detail {

inline SynthSpec synth_spec(const SyntheticDataSpec& s, std::size_t per_class, std::uint64_t sample_seed,
                            double shift = 0.0) {
  return {s.classes, s.dims, per_class, s.separation, s.seed, sample_seed, shift, derive_seed(s.seed, {0x617578})};
}

inline Partition make_partition(const RunConfig& c, const Dataset& data, std::size_t clients, std::uint64_t seed) {
  if (c.partition.scheme == "iid") return partition_iid(data, clients, seed);
  return partition_label_skew(data, clients, c.partition.classes_per_client, seed);
}

}  // namespace detail

inline Environment build_environment(const RunConfig& c) {
  c.validate();
  Environment env;
  const auto& s = c.dataset.synthetic;
  if (c.dataset.kind == "synthetic") {
    env.train = synth_classification(detail::synth_spec(s, s.per_class, derive_seed(s.seed, {1})));
    env.test = synth_classification(detail::synth_spec(s, s.test_per_class, derive_seed(s.seed, {2})));
  } else {
    env.train = load_idx(c.dataset.idx.train_images, c.dataset.idx.train_labels, c.dataset.idx.classes);
    env.test = load_idx(c.dataset.idx.test_images, c.dataset.idx.test_labels, env.train.classes);
  }
  env.base_train_size = env.train.size();
  env.arch = bind_architecture(c.model, env.train);
  env.partition = detail::make_partition(c, env.train, c.clients, c.seeds.partition);

  const auto t = traits(c.algorithm);
  const std::uint64_t meta_seed = derive_seed(c.seeds.partition, {0x6d657461});
  if (c.meta.source == "iid") {
    if (t.meta_update || t.shares_data) env.meta = sample_meta_set(env.train, c.meta.fraction, meta_seed).meta;
  } else {
    // Auxiliary pool: a shifted domain split over its own clients.
    const Dataset aux = synth_classification(detail::synth_spec(s, s.per_class, derive_seed(s.seed, {3}), c.meta.aux_shift));
    const Partition aux_part = detail::make_partition(c, aux, c.meta.aux_clients, derive_seed(c.seeds.partition, {0x617578}));
    const auto om = build_overlap_meta(env.train, env.partition, aux, aux_part, c.meta.overlap_rate, c.meta.fraction,
                                       c.meta.source_clients, meta_seed);
    if (t.meta_update || t.shares_data) env.meta = om.data;
    if (c.meta.test_source == "meta") {
      const Dataset aux_test =
          synth_classification(detail::synth_spec(s, s.test_per_class, derive_seed(s.seed, {4}), c.meta.aux_shift));
      const double share = static_cast<double>(om.primary_clients) / static_cast<double>(c.meta.source_clients);
      const std::size_t from_primary = round_count(share * static_cast<double>(env.test.size()));
      const auto prim_rows = shuffled_indices(env.test.size(), derive_seed(meta_seed, {5}));
      const auto aux_rows = shuffled_indices(aux_test.size(), derive_seed(meta_seed, {6}));
      std::vector<std::size_t> p(prim_rows.begin(), prim_rows.begin() + static_cast<std::ptrdiff_t>(from_primary));
      std::vector<std::size_t> a(aux_rows.begin(),
                                 aux_rows.begin() + static_cast<std::ptrdiff_t>(
                                                        std::min(aux_test.size(), env.test.size() - from_primary)));
      std::sort(p.begin(), p.end());
      std::sort(a.begin(), a.end());
      env.test = concat(env.test.subset(p), aux_test.subset(a));
    }
  }
  if (t.shares_data) {
    auto shared = apply_fedshare(env.train, env.partition, env.meta, derive_seed(c.seeds.partition, {0x7368}));
    env.train = std::move(shared.data);
    env.partition = std::move(shared.partition);
    env.meta = Dataset{};
  }
  if (c.clients != env.partition.clients.size()) throw ConfigError("partition client count mismatch");
  return env;
}

// ---------------------------------------------------------------------------
// Training loop

struct RoundRecord {
  /// 1-based count of completed rounds.
  std::size_t round = 0;
  std::vector<std::size_t> selected;
  std::optional<Evaluation> eval;
  std::optional<double> meta_loss;         // after the meta update
  std::optional<double> meta_loss_before;  // before it
  double wall_ms = 0.0;
};

struct RunResult {
  std::vector<RoundRecord> records;
  ParamVector final_params;
};

struct RunOptions {
  std::size_t threads = 1;
  std::function<void(const RoundRecord&)> on_round;
  /// Starting parameters; defaults to init_params(arch, seeds.init).
  std::optional<ParamVector> initial_params;
};

namespace detail {

/// Runs fn(i) for i in [0, n) over up to `threads` workers. Exceptions are
/// rethrown for the lowest failing index.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto work = [&](std::size_t tid, std::size_t stride) {
    for (std::size_t i = tid; i < n; i += stride) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work, t, workers);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

inline RunResult run_training(const RunConfig& c, const Environment& env, const RunOptions& opts = {}) {
  c.validate();
  const auto t = traits(c.algorithm);
  if (t.meta_update && env.meta.empty()) throw ConfigError("algorithm needs a meta set");
  const double base_lr = c.lr_reference_batch ? scaled_lr(c.lr, c.batch_size, *c.lr_reference_batch) : c.lr;

  RunResult result;
  result.final_params = opts.initial_params ? *opts.initial_params : init_params(env.arch, c.seeds.init);
  ParamVector& w = result.final_params;

  std::optional<ModelObjective> meta_objective;
  if (t.meta_update) meta_objective.emplace(env.arch, env.meta);

  for (std::size_t round = 0; round < c.rounds; ++round) {
    const auto started = std::chrono::steady_clock::now();
    RoundRecord rec;
    rec.round = round + 1;
    try {
      const double eta = lr_at(base_lr, c.lr_decay, round);
      auto server_lr = [&](const std::optional<double>& explicit_lr) {
        if (!explicit_lr) return eta;
        return c.decay_server_lrs ? lr_at(*explicit_lr, c.lr_decay, round) : *explicit_lr;
      };

      Rng select_rng(derive_seed(c.seeds.training, {0x73656c, round}));
      rec.selected = select_clients(c.clients, c.client_fraction, select_rng);

      const LocalSchedule schedule{c.local_epochs, c.batch_size, eta};
      std::vector<ClientUpdateResult> results(rec.selected.size());
      detail::parallel_for(rec.selected.size(), opts.threads, [&](std::size_t i) {
        const std::size_t k = rec.selected[i];
        const ModelObjective objective(env.arch, env.train, env.partition.clients[k].indices);
        const std::uint64_t seed = derive_seed(c.seeds.training, {0x636c69, round, k});
        switch (t.client) {
          case ClientRule::kSgd:
            results[i] = client_update_sgd(objective, k, w, schedule, std::nullopt, seed);
            break;
          case ClientRule::kSgdProx:
            results[i] = client_update_sgd(objective, k, w, schedule, ProxSpec{c.prox_mu}, seed);
            break;
          case ClientRule::kUga:
            results[i] = client_update_uga(objective, k, w, schedule, seed);
            break;
        }
      });

      w = t.aggregation == AggregationRule::kParams ? aggregate_params(results)
                                                    : aggregate_gradients(w, results, server_lr(c.lr_global));
      if (t.meta_update) {
        auto ms = meta_update_report(w, *meta_objective, server_lr(c.lr_meta), c.meta_steps);
        w = std::move(ms.params);
        rec.meta_loss = ms.loss_after;
        rec.meta_loss_before = ms.loss_before;
      }
      require_finite(w.values(), "global parameters");
      if ((round + 1) % c.eval_every == 0) rec.eval = evaluate(w, env.arch, env.test);
    } catch (const std::exception& e) {
      throw RoundError(round + 1, e.what());
    }
    if (c.record_wall_time)
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    if (opts.on_round) opts.on_round(rec);
    result.records.push_back(std::move(rec));
  }
  return result;
}

inline RunResult run_training(const RunConfig& c, const RunOptions& opts = {}) {
  return run_training(c, build_environment(c), opts);
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline constexpr const char* kMetricsHeader = "round,algorithm,accuracy,loss,meta_loss,selected_clients,wall_ms";

inline std::string metrics_row(const RoundRecord& r, Algorithm a) {
  char buf[128];
  std::string row = std::to_string(r.round) + "," + algorithm_name(a) + ",";
  std::snprintf(buf, sizeof buf, "%.6f,%.10g,", r.eval->accuracy, r.eval->loss);
  row += buf;
  if (r.meta_loss) {
    std::snprintf(buf, sizeof buf, "%.10g", *r.meta_loss);
    row += buf;
  }
  row += ",";
  for (std::size_t i = 0; i < r.selected.size(); ++i) row += (i ? ";" : "") + std::to_string(r.selected[i]);
  row += "," + std::to_string(std::llround(r.wall_ms));
  return row;
}

/// Streams one CSV row per evaluated round.
class MetricsWriter {
 public:
  MetricsWriter(std::ostream& out, Algorithm a) : out_(out), algorithm_(a) { out_ << kMetricsHeader << '\n'; }

  void write(const RoundRecord& r) {
    if (!r.eval) return;
    out_ << metrics_row(r, algorithm_) << '\n';
    out_.flush();
  }

 private:
  std::ostream& out_;
  Algorithm algorithm_;
};

}  // namespace fedmeta
