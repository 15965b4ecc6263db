#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pbench {

enum class ErrorCode {
  Usage,
  Config,
  Io,
  Format,
  Dimension,
  Invalid,
  UnknownName,
  MissingControl,
  GeneMismatch,
  Unsatisfiable,
  NonFinite,
  Empty,
};

/// Machine-parsable token, e.g. "E_GENE_MISMATCH".
std::string_view error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Non-fatal conditions collected by operations that skip or drop input.
using Warnings = std::vector<std::string>;

inline void warn(Warnings* sink, std::string message) {
  if (sink != nullptr) sink->push_back(std::move(message));
}

}  // namespace pbench
