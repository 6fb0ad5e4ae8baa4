#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace sublayer {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf produced by an op, or a solver that failed to converge.
struct NumericError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  ConfigError(std::string key, const std::string& what)
      : Error("config key '" + key + "': " + what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

struct FormatError : Error {
  using Error::Error;
};

struct DivergenceError : Error {
  DivergenceError(std::size_t step, const std::string& what)
      : Error("training diverged at step " + std::to_string(step) + ": " + what),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace sublayer
