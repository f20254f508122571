// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0
//
// fedmeta: partition | run | report | selftest.
// Exit codes: 0 success, 1 runtime or IO failure, 2 usage or config error.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedmeta/config.hpp"
#include "fedmeta/datasets.hpp"
#include "fedmeta/errors.hpp"
#include "fedmeta/hash.hpp"
#include "fedmeta/idx.hpp"
#include "fedmeta/orchestrator.hpp"
#include "fedmeta/report.hpp"
#include "fedmeta/selftest.hpp"

namespace {

using namespace fedmeta;

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

/// "kind:key=value,key=value".
struct DatasetFlag {
  std::string kind;
  std::map<std::string, std::string> fields;

  const std::string& need(const std::string& key) const {
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("--dataset " + kind + " needs " + key + "=...");
    return it->second;
  }
  std::size_t count(const std::string& key, std::size_t fallback) const {
    auto it = fields.find(key);
    if (it == fields.end()) return fallback;
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(key);
      return static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
      throw ConfigError("--dataset " + key + " must be a non-negative integer");
    }
  }
  double real(const std::string& key, double fallback) const {
    auto it = fields.find(key);
    if (it == fields.end()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::logic_error&) {
      throw ConfigError("--dataset " + key + " must be a number");
    }
  }
};

DatasetFlag parse_dataset_flag(const std::string& s) {
  DatasetFlag f;
  const auto colon = s.find(':');
  f.kind = s.substr(0, colon);
  if (f.kind != "synthetic" && f.kind != "idx") throw ConfigError("--dataset kind must be synthetic or idx");
  if (colon == std::string::npos) return f;
  std::stringstream rest(s.substr(colon + 1));
  std::string item;
  while (std::getline(rest, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--dataset field '" + item + "' is not key=value");
    f.fields[item.substr(0, eq)] = item.substr(eq + 1);
  }
  const std::vector<std::string> allowed =
      f.kind == "synthetic" ? std::vector<std::string>{"classes", "dims", "per_class", "separation", "seed"}
                            : std::vector<std::string>{"images", "labels", "classes"};
  for (const auto& [key, _] : f.fields)
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("unknown --dataset field '" + key + "'");
  return f;
}

Dataset load_dataset_flag(const DatasetFlag& f) {
  if (f.kind == "idx") return load_idx(f.need("images"), f.need("labels"), f.count("classes", 0));
  SynthSpec spec;
  spec.classes = f.count("classes", 10);
  spec.dims = f.count("dims", 20);
  spec.per_class = f.count("per_class", 100);
  spec.separation = f.real("separation", 3.0);
  spec.seed = f.count("seed", 0);
  spec.sample_seed = spec.seed;
  if (spec.classes < 1 || spec.dims < 1 || spec.per_class < 1)
    throw ConfigError("--dataset classes, dims and per_class must be positive");
  return synth_classification(spec);
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << content;
  if (!out) throw Error("write failed for " + path);
}

void print_histogram(const Partition& p) {
  std::size_t most = 1;
  for (const auto& c : p.clients) most = std::max(most, c.size());
  for (const auto& c : p.clients) {
    const std::size_t bar = (c.size() * 40 + most - 1) / most;
    std::printf("client %4zu %8zu %s\n", c.client_id, c.size(), std::string(bar, '#').c_str());
  }
  std::printf("total %zu examples over %zu clients\n", p.total(), p.clients.size());
}

struct PartitionArgs {
  std::string dataset;
  std::size_t k = 10;
  std::string scheme = "iid";
  std::size_t classes_per_client = 2;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_partition(const PartitionArgs& a) {
  DatasetFlag flag;
  try {
    flag = parse_dataset_flag(a.dataset);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  Dataset data;
  try {
    data = load_dataset_flag(flag);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  Partition p;
  try {
    if (a.scheme == "iid") {
      p = partition_iid(data, a.k, a.seed);
    } else {
      if (a.classes_per_client > data.classes)
        throw ConfigError("--classes-per-client " + std::to_string(a.classes_per_client) + " exceeds the " +
                          std::to_string(data.classes) + " classes of the dataset");
      p = partition_label_skew(data, a.k, a.classes_per_client, a.seed);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  try {
    write_file(a.out, partition_manifest(p).dump(2) + "\n");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  print_histogram(p);
  return kExitOk;
}

struct RunArgs {
  std::string config;
  std::string out;
  std::size_t threads = 1;
  bool no_wall_time = false;
};

int cmd_run(const RunArgs& a) {
  RunConfig config;
  Environment env;
  try {
    config = load_config(a.config);
    if (a.no_wall_time) config.record_wall_time = false;
    env = build_environment(config);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }

  std::ofstream csv(a.out, std::ios::binary);
  if (!csv) {
    std::fprintf(stderr, "error: cannot open %s for writing\n", a.out.c_str());
    return kExitRuntime;
  }
  try {
    nlohmann::json manifest;
    manifest["config"] = config_to_json(config);
    manifest["partition_hash"] = git_blob_sha1(partition_manifest(env.partition).dump());
    manifest["train_examples"] = env.train.size();
    manifest["test_examples"] = env.test.size();
    manifest["meta_examples"] = env.meta.size();
    manifest["parameters"] = env.arch.layout().total();
    write_file(a.out + ".manifest.json", manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }

  MetricsWriter writer(csv, config.algorithm);
  RunOptions opts;
  opts.threads = a.threads;
  opts.on_round = [&](const RoundRecord& r) { writer.write(r); };
  try {
    run_training(config, env, opts);
  } catch (const RoundError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  if (!csv) {
    std::fprintf(stderr, "error: write failed for %s\n", a.out.c_str());
    return kExitRuntime;
  }
  return kExitOk;
}

struct ReportArgs {
  std::vector<std::string> metrics;
  std::vector<double> milestones{0.70, 0.80, 0.90};
  std::size_t window = 5;
};

int cmd_report(const ReportArgs& a) {
  std::vector<MetricsRun> runs;
  for (const auto& path : a.metrics) {
    std::ifstream in(path);
    if (!in) {
      std::fprintf(stderr, "error: cannot open %s\n", path.c_str());
      return kExitRuntime;
    }
    try {
      runs.push_back(parse_metrics_csv(in, path));
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return kExitRuntime;
    }
  }
  std::fputs(format_report(runs, a.milestones, a.window).c_str(), stdout);
  return kExitOk;
}

int cmd_selftest(double perturb) {
  SelftestOptions opts;
  opts.uga_perturbation = perturb;
  const auto report = run_selftest(opts);
  for (const auto& c : report.checks)
    std::printf("%s %-36s error=%.3e tol=%.0e\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.error, c.tolerance);
  return report.all_passed() ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with unbiased gradient aggregation and meta updates"};
  app.require_subcommand(1, 1);

  PartitionArgs pa;
  auto* partition = app.add_subcommand("partition", "Partition a dataset across clients and write a manifest");
  partition->add_option("--dataset", pa.dataset, "synthetic:classes=..,dims=..,per_class=..,separation=..,seed=.. "
                                                  "or idx:images=PATH,labels=PATH")
      ->required();
  partition->add_option("--k", pa.k, "Number of clients")->required();
  partition->add_option("--scheme", pa.scheme, "iid or label-skew")->check(CLI::IsMember({"iid", "label-skew"}));
  partition->add_option("--classes-per-client", pa.classes_per_client, "Classes per client for label-skew");
  partition->add_option("--seed", pa.seed, "Partition seed");
  partition->add_option("--out", pa.out, "Manifest path")->required();

  RunArgs ra;
  auto* run = app.add_subcommand("run", "Train according to a run config and stream metrics CSV");
  run->add_option("--config", ra.config, "Run config JSON")->required();
  run->add_option("--out", ra.out, "Metrics CSV path")->required();
  run->add_option("--threads", ra.threads, "Client-parallel worker threads")->check(CLI::PositiveNumber);
  run->add_flag("--no-wall-time", ra.no_wall_time, "Write 0 in the wall_ms column");

  ReportArgs rp;
  auto* report = app.add_subcommand("report", "Rounds-to-milestone table from metrics CSVs");
  report->add_option("--metrics", rp.metrics, "Metrics CSV files")->required()->expected(1, -1);
  report->add_option("--milestones", rp.milestones, "Accuracy milestones")->delimiter(',');
  report->add_option("--window", rp.window, "Trailing-mean window in eval rows")->check(CLI::PositiveNumber);

  double perturb = 0.0;
  auto* selftest = app.add_subcommand("selftest", "Run the embedded derivative oracle checks");
  selftest->add_option("--perturb-uga", perturb)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*partition) return cmd_partition(pa);
    if (*run) return cmd_run(ra);
    if (*report) return cmd_report(rp);
    if (*selftest) return cmd_selftest(perturb);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
