#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace stall {

enum class ErrorCode {
  kBadMagic,
  kUnsupportedVersion,
  kTruncated,
  kNonFinite,
  kIo,
  kDimensionMismatch,
  kInvalidArgument,
  kInsufficientData,
  kOutOfRange,
  kLabelViolation,
  kFormat,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kUnsupportedVersion: return "unsupported_version";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kDimensionMismatch: return "dimension_mismatch";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kInsufficientData: return "insufficient_data";
    case ErrorCode::kOutOfRange: return "out_of_range";
    case ErrorCode::kLabelViolation: return "label_violation";
    case ErrorCode::kFormat: return "format_error";
  }
  return "unknown";
}

// Every failure in the library is reported through this type; `code()` is
// stable and machine-readable, `what()` is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace stall
