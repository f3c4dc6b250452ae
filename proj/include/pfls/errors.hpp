// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace pfls {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration value (unknown stage id, bad fractions, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor shape or dimension mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Mismatched trees during averaging.
class AggregationError : public Error {
 public:
  using Error::Error;
};

// Corrupt, truncated or incompatible checkpoint file.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Violation of the federation round protocol.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Empty split or missing data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during local training; carries the failing site/round.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& msg, int site, int round)
      : Error(msg), site_index(site), round_index(round) {}
  int site_index = -1;
  int round_index = -1;
};

}  // namespace pfls
