#ifndef QUADCV_ERROR_HPP
#define QUADCV_ERROR_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace quadcv {

/// Malformed input file; `line` is 1-based, 0 when not tied to a line.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : std::runtime_error(source + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": " + what),
        line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Raised when an optimization step produces a non-finite gradient.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace quadcv

#endif  // QUADCV_ERROR_HPP
