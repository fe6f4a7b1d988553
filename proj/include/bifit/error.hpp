#pragma once

#include <stdexcept>
#include <string>

namespace bifit {

/// Base class for all library errors. `code()` is a short machine-parsable
/// tag that the CLI prints as the first token of its error line.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("E_DIMENSION", what) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error("E_INPUT", what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("E_CONTRACT", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("E_IO", what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("E_NUMERIC", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("E_CONFIG", what) {}
};

}  // namespace bifit
