// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run-config JSON. Every object is checked against a fixed key set and
// unknown keys are rejected, so a misspelled hyperparameter fails loudly
// instead of silently falling back to its default. See docs/config.md.

#pragma once

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "fedmeta/errors.hpp"
#include "fedmeta/orchestrator.hpp"
#include "json.hpp"

namespace fedmeta {

namespace detail {

using nlohmann::json;

inline void check_object(const json& j, const std::string& where, std::initializer_list<const char*> allowed,
                         std::initializer_list<const char*> required = {}) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  for (const char* key : required)
    if (!j.contains(key)) throw ConfigError("missing required key '" + std::string(key) + "' in " + where);
}

inline bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

inline std::string path_of(const std::string& where, const char* key) { return where + "." + key; }

template <class T>
void read(const json& j, const std::string& where, const char* key, T& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  const std::string p = path_of(where, key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(p + " must be a boolean");
    out = v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(p + " must be a string");
    out = v.get<std::string>();
  } else if constexpr (std::is_same_v<T, double>) {
    if (!v.is_number()) throw ConfigError(p + " must be a number");
    out = v.get<double>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!is_count(v)) throw ConfigError(p + " must be a non-negative integer");
    out = v.get<T>();
  } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
    if (!v.is_array()) throw ConfigError(p + " must be an array of non-negative integers");
    out.clear();
    for (const auto& e : v) {
      if (!is_count(e)) throw ConfigError(p + " must be an array of non-negative integers");
      out.push_back(e.get<std::size_t>());
    }
  } else {
    static_assert(sizeof(T) == 0, "unsupported config field type");
  }
}

template <class T>
void read_optional(const json& j, const std::string& where, const char* key, std::optional<T>& out) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  T v{};
  read(j, where, key, v);
  out = v;
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "logreg") return ModelKind::kLogReg;
  if (s == "mlp") return ModelKind::kMlp;
  if (s == "cnn") return ModelKind::kCnn;
  throw ConfigError("unknown model kind '" + s + "'");
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  RunConfig c;
  detail::check_object(j, "config",
                       {"algorithm", "clients", "client_fraction", "local_epochs", "batch_size", "lr", "lr_global",
                        "lr_meta", "lr_decay", "decay_server_lrs", "lr_reference_batch", "prox_mu", "rounds",
                        "eval_every", "meta_steps", "seeds", "model", "dataset", "partition", "meta",
                        "record_wall_time"},
                       {"algorithm", "clients", "rounds", "lr", "model", "dataset"});
  std::string algorithm;
  read(j, "config", "algorithm", algorithm);
  c.algorithm = parse_algorithm(algorithm);
  read(j, "config", "clients", c.clients);
  read(j, "config", "client_fraction", c.client_fraction);
  read(j, "config", "local_epochs", c.local_epochs);
  if (j.contains("batch_size")) {
    const auto& b = j.at("batch_size");
    if (b.is_string() && b.get<std::string>() == "full")
      c.batch_size = kFullBatch;
    else if (detail::is_count(b) && b.get<std::size_t>() > 0)
      c.batch_size = b.get<std::size_t>();
    else
      throw ConfigError("config.batch_size must be a positive integer or \"full\"");
  }
  read(j, "config", "lr", c.lr);
  detail::read_optional(j, "config", "lr_global", c.lr_global);
  detail::read_optional(j, "config", "lr_meta", c.lr_meta);
  read(j, "config", "lr_decay", c.lr_decay);
  read(j, "config", "decay_server_lrs", c.decay_server_lrs);
  detail::read_optional(j, "config", "lr_reference_batch", c.lr_reference_batch);
  read(j, "config", "prox_mu", c.prox_mu);
  read(j, "config", "rounds", c.rounds);
  read(j, "config", "eval_every", c.eval_every);
  read(j, "config", "meta_steps", c.meta_steps);
  read(j, "config", "record_wall_time", c.record_wall_time);

  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    detail::check_object(s, "config.seeds", {"partition", "init", "training"});
    read(s, "config.seeds", "partition", c.seeds.partition);
    read(s, "config.seeds", "init", c.seeds.init);
    read(s, "config.seeds", "training", c.seeds.training);
  }

  {
    const auto& m = j.at("model");
    detail::check_object(m, "config.model", {"kind", "hidden", "conv_channels", "kernel", "dense", "dropout"}, {"kind"});
    std::string kind;
    read(m, "config.model", "kind", kind);
    c.model.kind = detail::parse_model_kind(kind);
    if (c.model.kind == ModelKind::kCnn) c.model.conv_channels = {8, 16};
    read(m, "config.model", "hidden", c.model.hidden);
    read(m, "config.model", "conv_channels", c.model.conv_channels);
    read(m, "config.model", "kernel", c.model.kernel);
    read(m, "config.model", "dense", c.model.dense);
    read(m, "config.model", "dropout", c.model.dropout);
  }

  {
    const auto& d = j.at("dataset");
    if (!d.is_object() || !d.contains("kind")) throw ConfigError("config.dataset needs a kind");
    read(d, "config.dataset", "kind", c.dataset.kind);
    if (c.dataset.kind == "synthetic") {
      auto& s = c.dataset.synthetic;
      detail::check_object(d, "config.dataset",
                           {"kind", "classes", "dims", "per_class", "test_per_class", "separation", "seed"});
      read(d, "config.dataset", "classes", s.classes);
      read(d, "config.dataset", "dims", s.dims);
      read(d, "config.dataset", "per_class", s.per_class);
      read(d, "config.dataset", "test_per_class", s.test_per_class);
      read(d, "config.dataset", "separation", s.separation);
      read(d, "config.dataset", "seed", s.seed);
    } else if (c.dataset.kind == "idx") {
      auto& s = c.dataset.idx;
      detail::check_object(d, "config.dataset",
                           {"kind", "train_images", "train_labels", "test_images", "test_labels", "classes"},
                           {"train_images", "train_labels", "test_images", "test_labels"});
      read(d, "config.dataset", "train_images", s.train_images);
      read(d, "config.dataset", "train_labels", s.train_labels);
      read(d, "config.dataset", "test_images", s.test_images);
      read(d, "config.dataset", "test_labels", s.test_labels);
      read(d, "config.dataset", "classes", s.classes);
    } else {
      throw ConfigError("config.dataset.kind must be synthetic or idx");
    }
  }

  if (j.contains("partition")) {
    const auto& p = j.at("partition");
    detail::check_object(p, "config.partition", {"scheme", "classes_per_client"});
    read(p, "config.partition", "scheme", c.partition.scheme);
    read(p, "config.partition", "classes_per_client", c.partition.classes_per_client);
  }

  if (j.contains("meta")) {
    const auto& m = j.at("meta");
    detail::check_object(m, "config.meta",
                         {"fraction", "source", "overlap_rate", "source_clients", "aux_clients", "aux_shift",
                          "test_source"});
    read(m, "config.meta", "fraction", c.meta.fraction);
    read(m, "config.meta", "source", c.meta.source);
    read(m, "config.meta", "overlap_rate", c.meta.overlap_rate);
    read(m, "config.meta", "source_clients", c.meta.source_clients);
    read(m, "config.meta", "aux_clients", c.meta.aux_clients);
    read(m, "config.meta", "aux_shift", c.meta.aux_shift);
    read(m, "config.meta", "test_source", c.meta.test_source);
  }

  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["algorithm"] = algorithm_name(c.algorithm);
  j["clients"] = c.clients;
  j["client_fraction"] = c.client_fraction;
  j["local_epochs"] = c.local_epochs;
  if (c.batch_size == kFullBatch)
    j["batch_size"] = "full";
  else
    j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["lr_global"] = c.lr_global ? nlohmann::json(*c.lr_global) : nlohmann::json(nullptr);
  j["lr_meta"] = c.lr_meta ? nlohmann::json(*c.lr_meta) : nlohmann::json(nullptr);
  j["lr_decay"] = c.lr_decay;
  j["decay_server_lrs"] = c.decay_server_lrs;
  j["lr_reference_batch"] = c.lr_reference_batch ? nlohmann::json(*c.lr_reference_batch) : nlohmann::json(nullptr);
  j["prox_mu"] = c.prox_mu;
  j["rounds"] = c.rounds;
  j["eval_every"] = c.eval_every;
  j["meta_steps"] = c.meta_steps;
  j["record_wall_time"] = c.record_wall_time;
  j["seeds"] = {{"partition", c.seeds.partition}, {"init", c.seeds.init}, {"training", c.seeds.training}};
  j["model"] = {{"kind", model_kind_name(c.model.kind)},
                {"hidden", c.model.hidden},
                {"conv_channels", c.model.conv_channels},
                {"kernel", c.model.kernel},
                {"dense", c.model.dense},
                {"dropout", c.model.dropout}};
  if (c.dataset.kind == "synthetic") {
    const auto& s = c.dataset.synthetic;
    j["dataset"] = {{"kind", "synthetic"},         {"classes", s.classes},       {"dims", s.dims},
                    {"per_class", s.per_class},     {"test_per_class", s.test_per_class},
                    {"separation", s.separation}, {"seed", s.seed}};
  } else {
    const auto& s = c.dataset.idx;
    j["dataset"] = {{"kind", "idx"},
                    {"train_images", s.train_images},
                    {"train_labels", s.train_labels},
                    {"test_images", s.test_images},
                    {"test_labels", s.test_labels},
                    {"classes", s.classes}};
  }
  j["partition"] = {{"scheme", c.partition.scheme}, {"classes_per_client", c.partition.classes_per_client}};
  j["meta"] = {{"fraction", c.meta.fraction},
               {"source", c.meta.source},
               {"overlap_rate", c.meta.overlap_rate},
               {"source_clients", c.meta.source_clients},
               {"aux_clients", c.meta.aux_clients},
               {"aux_shift", c.meta.aux_shift},
               {"test_source", c.meta.test_source}};
  return j;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace fedmeta
