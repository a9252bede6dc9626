#pragma once

#include <stdexcept>
#include <string>

namespace simipu {

/// Base for every error raised by the library. The CLI maps each subclass
/// onto a process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or a violated precondition on sizes/ranges.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operand shapes do not agree.
class DimensionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// NaN/Inf encountered where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input (calibration, run configuration).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A scene has fewer points than the point encoder's final stage needs.
class UndersizedSceneError : public Error {
 public:
  using Error::Error;
};

/// InfoNCE needs at least two pairs so that negatives exist.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

/// A loss was asked to reduce over zero valid targets.
class EmptyTargetError : public Error {
 public:
  using Error::Error;
};

}  // namespace simipu
