#pragma once

#include <stdexcept>
#include <string>

namespace clickseg {

enum class ErrorCode {
  invalid_argument,
  validation,
  io,
  not_found,
  busy,
  diverged,
  exhausted,
  mismatch,
};

const char* to_string(ErrorCode code);

/// Library error carrying a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace clickseg
