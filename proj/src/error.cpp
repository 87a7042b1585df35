#include "clickseg/error.hpp"

namespace clickseg {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::validation: return "validation";
    case ErrorCode::io: return "io";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::busy: return "busy";
    case ErrorCode::diverged: return "diverged";
    case ErrorCode::exhausted: return "exhausted";
    case ErrorCode::mismatch: return "mismatch";
  }
  return "unknown";
}

}  // namespace clickseg
