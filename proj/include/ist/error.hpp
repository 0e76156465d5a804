// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ist {

/// Root of the library's exception hierarchy.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by a forward or backward computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Missing, empty, or malformed input data (corpora, checkpoints, artifacts).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Training loss crossed the divergence threshold.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autodiff or optimizer API (consumed tape, gradient for a
/// frozen group, and so on).
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace ist
