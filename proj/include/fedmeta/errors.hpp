// Copyright 2026 The fedmeta Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace fedmeta {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents or layouts that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf reached a place that requires finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent data files and dataset requests.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid run configuration or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Failure inside a training run, tagged with the round it happened in.
class RoundError : public Error {
 public:
  RoundError(std::size_t round, const std::string& what)
      : Error("round " + std::to_string(round) + ": " + what), round_(round) {}
  std::size_t round() const noexcept { return round_; }

 private:
  std::size_t round_;
};

}  // namespace fedmeta
