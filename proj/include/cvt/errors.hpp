#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "cvt/precision.hpp"

CVT_BEGIN_NAMESPACE

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible (both shapes are part of the message).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A convolution or embedding would produce an empty spatial extent.
class GeometryError : public Error {
 public:
  GeometryError(const std::string& axis, const std::string& what)
      : Error("geometry error on axis " + axis + ": " + what), axis_(axis) {}
  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

/// Caller violated an operation precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// An invalid configuration value; field() names the offending field.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : Error("config error in '" + field + "': " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Non-finite value produced by an op (debug builds) or by training.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what, std::int64_t step = -1)
      : Error(what), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class CheckpointFormatError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointConfigMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Output file could not be created or written.
class IoError : public Error {
 public:
  using Error::Error;
};

CVT_END_NAMESPACE
