#include "ssmstyle/errors.hpp"

namespace ssmstyle {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kDegenerateInput: return "degenerate-input error";
    case ErrorKind::kDegeneratePrompt: return "degenerate-prompt error";
    case ErrorKind::kContract: return "contract error";
    case ErrorKind::kInput: return "input error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kState: return "state error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kIo: return "I/O error";
  }
  return "error";
}

void raise(ErrorKind kind, const std::string& what) {
  throw Error(kind, std::string(error_kind_name(kind)) + ": " + what);
}

}  // namespace ssmstyle
