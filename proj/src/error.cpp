#include "moex/error.hpp"

namespace moex {

const char* to_string(ErrorCategory category) noexcept {
  switch (category) {
    case ErrorCategory::Dimension: return "dimension";
    case ErrorCategory::Numeric: return "numeric";
    case ErrorCategory::Config: return "config";
    case ErrorCategory::Format: return "format";
    case ErrorCategory::Validation: return "validation";
    case ErrorCategory::DegenerateStatistics: return "degenerate-statistics";
    case ErrorCategory::Routing: return "routing";
    case ErrorCategory::Io: return "io";
  }
  return "unknown";
}

const char* to_string(FormatFault fault) noexcept {
  switch (fault) {
    case FormatFault::BadMagic: return "bad magic";
    case FormatFault::UnsupportedVersion: return "unsupported version";
    case FormatFault::Truncated: return "truncated";
    case FormatFault::BadHeader: return "bad header";
    case FormatFault::ManifestOverflow: return "manifest overflow";
    case FormatFault::OverlappingTensors: return "overlapping tensors";
    case FormatFault::ShapeMismatch: return "shape mismatch";
    case FormatFault::CountMismatch: return "count mismatch";
  }
  return "unknown";
}

}  // namespace moex
