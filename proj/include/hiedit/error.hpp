#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hiedit {

// Every error raised by the library carries a short machine-readable kind
// that the CLI prints as `error kind=<kind> ...`.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};
struct IndexError : Error {
  explicit IndexError(const std::string& w) : Error("index", w) {}
};
struct ArgumentError : Error {
  explicit ArgumentError(const std::string& w) : Error("argument", w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error("contract", w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error("numeric", w) {}
};
struct CapacityError : Error {
  explicit CapacityError(const std::string& w) : Error("capacity", w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io", w) {}
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& w)
      : Error("parse", "line " + std::to_string(line) + ": " + w), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public Error {
 public:
  ValidationError(std::string key, const std::string& w)
      : Error("validation", key + ": " + w), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class DependencyError : public Error {
 public:
  DependencyError(std::string missing, const std::string& w)
      : Error("dependency", w), missing_(std::move(missing)) {}
  const std::string& missing() const noexcept { return missing_; }

 private:
  std::string missing_;
};

class TrajectoryAbort : public Error {
 public:
  TrajectoryAbort(std::size_t step, const std::string& w)
      : Error("trajectory-abort", "step " + std::to_string(step) + ": " + w), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace hiedit
