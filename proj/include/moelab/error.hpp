#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace moelab {

// Malformed input data (trace lines, config or report files).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// A file could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition violations on API arguments are reported as std::invalid_argument.

}  // namespace moelab
