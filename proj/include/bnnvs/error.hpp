#pragma once

#include <stdexcept>
#include <string>

namespace bnnvs {

/// Base class for every error raised by the library. `code()` is a stable,
/// machine-readable tag used by the CLI error JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config_error", what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what, long draw = -1)
      : Error("numeric_error", what), draw_(draw) {}
  long draw() const noexcept { return draw_; }

 private:
  long draw_;
};

class SamplerError : public Error {
 public:
  explicit SamplerError(const std::string& what) : Error("sampler_failure", what) {}
};

class InsufficientDrawsError : public Error {
 public:
  explicit InsufficientDrawsError(const std::string& what)
      : Error("insufficient_draws", what) {}
};

class DegenerateError : public Error {
 public:
  explicit DegenerateError(const std::string& what) : Error("degenerate", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io_error", what) {}
};

}  // namespace bnnvs
