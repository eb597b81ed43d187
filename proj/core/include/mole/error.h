// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace mole {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents of two operands (or a tensor and its data) disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value outside the domain of an operation (bad id, bad step, NaN input).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration. `field()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Filesystem failure (open, read, write, short read).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mole
