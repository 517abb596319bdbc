#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace advdistill {

// Base of every error this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor or layer shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid scalar setting (temperature, rate, unknown kind, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Bad data values, e.g. a label outside [0, C).
class DataError : public Error {
 public:
  using Error::Error;
};

// Network spec whose layers do not compose.
class BuildError : public Error {
 public:
  using Error::Error;
};

// Malformed binary file. Carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// A loss became NaN or infinite during training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : Error(what + " at step " + std::to_string(step)), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace advdistill
