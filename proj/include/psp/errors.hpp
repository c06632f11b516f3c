#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace psp {

enum class ErrorCode {
  kEmptyDocument,
  kParse,
  kEmptyDataset,
  kCapacity,
  kConfig,
  kLengthOverflow,
  kDegenerateDocument,
  kShapeMismatch,
  kNumerical,
  kIo,
  kMissingCheckpoint,
  kUsage,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kEmptyDocument: return "empty_document";
    case ErrorCode::kParse: return "parse_error";
    case ErrorCode::kEmptyDataset: return "empty_dataset";
    case ErrorCode::kCapacity: return "capacity";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kLengthOverflow: return "length_overflow";
    case ErrorCode::kDegenerateDocument: return "degenerate_document";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNumerical: return "numerical";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kMissingCheckpoint: return "missing_checkpoint";
    case ErrorCode::kUsage: return "usage";
  }
  return "unknown";
}

// All library failures are reported through this type; the CLI maps the code
// onto its single-line error record.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace psp
