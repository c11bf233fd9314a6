#pragma once

#include <stdexcept>
#include <string>

namespace cxplain {

enum class ErrorKind {
  input,
  catalog,
  shape,
  domain,
  rank,
  insufficient_samples,
  empty_activations,
  degenerate_contrast,
  degenerate_hyperplane,
  unsupported_op,
  size,
  build,
  io,
  config,
  fixture,
};

const char* to_string(ErrorKind kind) noexcept;

/// Every failure raised by the toolkit carries a kind so callers (and tests)
/// can branch on the failure class without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace cxplain
