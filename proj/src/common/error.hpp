#pragma once

#include <stdexcept>
#include <string>

namespace tel2veh {

// Coarse failure categories. The C API maps each one onto a status code.
enum class ErrorKind {
  invalid_argument,
  io,
  parse,
  data,
  config,
  numeric,
  state,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace tel2veh
