#pragma once

#include <stdexcept>
#include <string>

namespace ege {

enum class ErrorCode {
  dimension = 1,
  config,
  contract,
  numeric,
  vocabulary,
  degenerate,
  format,
  consistency,
  io,
  empty_input,
};

const char* to_string(ErrorCode code) noexcept;

// Every failure raised by the library carries one of the codes above; the C API
// maps them one-to-one onto its status values.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void raise(ErrorCode code, const std::string& message);

inline void require(bool cond, ErrorCode code, const std::string& message) {
  if (!cond) raise(code, message);
}

}  // namespace ege
