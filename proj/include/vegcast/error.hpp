#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vegcast {

enum class ErrorCode {
  shape_mismatch,
  invalid_argument,
  non_finite,
  tape_state,
  config,
  io,
  bad_magic,
  version_mismatch,
  truncated,
  checksum,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "shape mismatch";
    case ErrorCode::invalid_argument: return "invalid argument";
    case ErrorCode::non_finite: return "non-finite value";
    case ErrorCode::tape_state: return "tape state";
    case ErrorCode::config: return "config";
    case ErrorCode::io: return "io";
    case ErrorCode::bad_magic: return "bad magic";
    case ErrorCode::version_mismatch: return "version mismatch";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::checksum: return "checksum";
  }
  return "unknown";
}

/// Error carrying a machine-readable code. what() is "<code>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace vegcast
