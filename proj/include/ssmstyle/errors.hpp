#pragma once

#include <stdexcept>
#include <string>

namespace ssmstyle {

enum class ErrorKind {
  kDimension,
  kDegenerateInput,
  kDegeneratePrompt,
  kContract,
  kInput,
  kNumeric,
  kState,
  kConfig,
  kIo,
};

const char* error_kind_name(ErrorKind kind);

// Base of every error thrown by the library. The kind drives the C API
// status code and the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void raise(ErrorKind kind, const std::string& what);

}  // namespace ssmstyle
