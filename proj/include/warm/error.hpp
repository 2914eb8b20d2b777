#pragma once

#include <stdexcept>
#include <string>

namespace warm {

enum class ErrorKind {
  Argument,
  Config,
  Format,
  Numeric,
  Io,
  Checkpoint,
  Usage,
};

// Single exception type for the library; the kind decides the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace warm
