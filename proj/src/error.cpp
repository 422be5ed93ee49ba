#include "ege/error.hpp"

namespace ege {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::dimension: return "dimension error";
    case ErrorCode::config: return "configuration error";
    case ErrorCode::contract: return "contract error";
    case ErrorCode::numeric: return "numeric error";
    case ErrorCode::vocabulary: return "vocabulary error";
    case ErrorCode::degenerate: return "degenerate embedding";
    case ErrorCode::format: return "format error";
    case ErrorCode::consistency: return "consistency error";
    case ErrorCode::io: return "io error";
    case ErrorCode::empty_input: return "empty input";
  }
  return "unknown error";
}

void raise(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace ege
