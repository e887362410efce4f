#pragma once

#include <stdexcept>
#include <string>

namespace semid {

// Numeric values double as CLI exit codes and C API status codes.
enum class ErrorKind : int {
  internal = 1,
  config = 2,
  data = 3,
  divergence = 4,
  contract = 5,
  io = 6,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

// Precondition check for caller bugs.
inline void expects(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::contract, "contract violation: " + what);
}

}  // namespace semid
