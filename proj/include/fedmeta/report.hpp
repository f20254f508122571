// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reading metrics CSVs back and summarizing them as rounds-to-milestone
// tables.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedmeta/errors.hpp"
#include "fedmeta/orchestrator.hpp"

namespace fedmeta {

struct MetricsRow {
  std::size_t round = 0;
  std::string algorithm;
  double accuracy = 0.0;
  double loss = 0.0;
  std::optional<double> meta_loss;
  std::vector<std::size_t> selected;
  long long wall_ms = 0;
};

struct MetricsRun {
  std::string name;
  std::vector<MetricsRow> rows;
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, bool& ok) {
  if (s.empty()) {
    ok = false;
    return 0.0;
  }
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  ok = end == s.c_str() + s.size();
  return v;
}

inline unsigned long long parse_uint(const std::string& s, bool& ok) {
  ok = !s.empty() && std::all_of(s.begin(), s.end(), [](char ch) { return ch >= '0' && ch <= '9'; });
  return ok ? std::strtoull(s.c_str(), nullptr, 10) : 0;
}

}  // namespace detail

/// Parses a metrics CSV. Errors carry the 1-based line number.
inline MetricsRun parse_metrics_csv(std::istream& in, const std::string& name) {
  MetricsRun run{name, {}};
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) -> DataError {
    return DataError(name + ":" + std::to_string(lineno) + ": " + why);
  };
  if (!std::getline(in, line)) {
    lineno = 1;
    throw fail("missing header");
  }
  lineno = 1;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricsHeader) throw fail("unexpected header '" + line + "'");
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 7) throw fail("expected 7 fields, got " + std::to_string(f.size()));
    MetricsRow r;
    bool ok = false;
    r.round = static_cast<std::size_t>(detail::parse_uint(f[0], ok));
    if (!ok) throw fail("bad round '" + f[0] + "'");
    r.algorithm = f[1];
    r.accuracy = detail::parse_double(f[2], ok);
    if (!ok || r.accuracy < 0.0 || r.accuracy > 1.0) throw fail("bad accuracy '" + f[2] + "'");
    r.loss = detail::parse_double(f[3], ok);
    if (!ok) throw fail("bad loss '" + f[3] + "'");
    if (!f[4].empty()) {
      r.meta_loss = detail::parse_double(f[4], ok);
      if (!ok) throw fail("bad meta_loss '" + f[4] + "'");
    }
    if (!f[5].empty())
      for (const auto& id : detail::split(f[5], ';')) {
        r.selected.push_back(static_cast<std::size_t>(detail::parse_uint(id, ok)));
        if (!ok) throw fail("bad client id '" + id + "'");
      }
    r.wall_ms = static_cast<long long>(detail::parse_uint(f[6], ok));
    if (!ok) throw fail("bad wall_ms '" + f[6] + "'");
    if (!run.rows.empty() && r.round <= run.rows.back().round) throw fail("rounds must increase");
    run.rows.push_back(std::move(r));
  }
  return run;
}

/// Mean accuracy over the trailing `window` rows ending at each row (fewer at
/// the start of the run).
inline std::vector<double> trailing_mean_accuracy(const MetricsRun& run, std::size_t window = 5) {
  std::vector<double> out;
  double sum = 0.0;
  for (std::size_t i = 0; i < run.rows.size(); ++i) {
    sum += run.rows[i].accuracy;
    if (i >= window) sum -= run.rows[i - window].accuracy;
    out.push_back(sum / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

/// First round whose trailing-mean accuracy reaches `milestone`.
inline std::optional<std::size_t> rounds_to_milestone(const MetricsRun& run, double milestone, std::size_t window = 5) {
  const auto smooth = trailing_mean_accuracy(run, window);
  for (std::size_t i = 0; i < smooth.size(); ++i)
    if (smooth[i] >= milestone) return run.rows[i].round;
  return std::nullopt;
}

/// Mean accuracy of the last `last` evaluated rounds.
inline double final_accuracy(const MetricsRun& run, std::size_t last = 10) {
  if (run.rows.empty()) throw DataError(run.name + ": no rows");
  const std::size_t n = std::min(last, run.rows.size());
  double s = 0.0;
  for (std::size_t i = run.rows.size() - n; i < run.rows.size(); ++i) s += run.rows[i].accuracy;
  return s / static_cast<double>(n);
}

inline std::string format_report(const std::vector<MetricsRun>& runs, const std::vector<double>& milestones,
                                 std::size_t window = 5) {
  std::ostringstream os;
  char buf[64];
  std::size_t name_w = 3;
  for (const auto& r : runs) name_w = std::max(name_w, r.name.size());
  auto pad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
  };
  os << pad("run", name_w) << "  " << pad("algorithm", 12);
  for (double m : milestones) {
    std::snprintf(buf, sizeof buf, "%g%%", m * 100.0);
    std::string h = buf;
    std::snprintf(buf, sizeof buf, "  %7s", h.c_str());
    os << buf;
  }
  os << "    final\n";
  for (const auto& r : runs) {
    os << pad(r.name, name_w) << "  " << pad(r.rows.empty() ? "-" : r.rows.front().algorithm, 12);
    for (double m : milestones) {
      const auto hit = rounds_to_milestone(r, m, window);
      if (hit) {
        std::snprintf(buf, sizeof buf, "  %7zu", *hit);
        os << buf;
      } else {
        os << "        —";
      }
    }
    if (r.rows.empty()) {
      os << "        —\n";
    } else {
      std::snprintf(buf, sizeof buf, "  %7.4f\n", final_accuracy(r));
      os << buf;
    }
  }
  return os.str();
}

}  // namespace fedmeta
