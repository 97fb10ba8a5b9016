#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace transolver {

// Shape or argument mismatch detected at an API boundary.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Numerically degenerate input (zero-mass slices, zero-norm targets, NaN).
class DegenerateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A cache or checkpoint was produced by a different model.
class FingerprintError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Malformed file content; carries the 1-based line and byte offset.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t line, std::size_t offset)
      : std::runtime_error(what + " (line " + std::to_string(line) + ", byte offset " +
                           std::to_string(offset) + ")"),
        line_(line),
        offset_(offset) {}
  std::size_t line() const noexcept { return line_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t line_;
  std::size_t offset_;
};

}  // namespace transolver
