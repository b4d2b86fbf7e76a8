// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace q2l {

/// Shapes of two operands do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A configuration value is out of its domain. `field()` holds the dotted path when known.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& msg, std::string field = {})
      : std::invalid_argument(field.empty() ? msg : field + ": " + msg), message_(msg), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }
  /// what() without the field prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  std::string message_;
  std::string field_;
};

/// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint content does not match its manifest.
class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsupportedVersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace q2l
