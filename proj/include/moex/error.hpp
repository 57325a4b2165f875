#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace moex {

enum class ErrorCategory {
  Dimension,
  Numeric,
  Config,
  Format,
  Validation,
  DegenerateStatistics,
  Routing,
  Io,
};

const char* to_string(ErrorCategory category) noexcept;

/// Base of every exception thrown by the library. The category drives the
/// CLI exit code, so callers rarely need the concrete subclass.
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& m) : Error(ErrorCategory::Dimension, m) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error(ErrorCategory::Numeric, m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(ErrorCategory::Config, m) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& m) : Error(ErrorCategory::Validation, m) {}
};

class DegenerateStatisticsError : public Error {
 public:
  explicit DegenerateStatisticsError(const std::string& m)
      : Error(ErrorCategory::DegenerateStatistics, m) {}
};

class RoutingError : public Error {
 public:
  explicit RoutingError(const std::string& m) : Error(ErrorCategory::Routing, m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error(ErrorCategory::Io, m) {}
};

/// Structural problems in a model/capture container or an IDX file.
enum class FormatFault {
  BadMagic,
  UnsupportedVersion,
  Truncated,
  BadHeader,
  ManifestOverflow,
  OverlappingTensors,
  ShapeMismatch,
  CountMismatch,
};

const char* to_string(FormatFault fault) noexcept;

class FormatError : public Error {
 public:
  FormatError(FormatFault fault, const std::string& m)
      : Error(ErrorCategory::Format, std::string(to_string(fault)) + ": " + m), fault_(fault) {}

  FormatFault fault() const noexcept { return fault_; }

 private:
  FormatFault fault_;
};

}  // namespace moex
