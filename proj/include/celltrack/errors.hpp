#pragma once

#include <stdexcept>
#include <string>

namespace celltrack {

/// Invalid shapes, hyperparameters or presets supplied by the caller.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API misuse, e.g. calling backward on a value that was never taped.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed input file. The message carries the file and line.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what),
        file_(file),
        line_(line) {}

  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

/// Training diverged or a numeric invariant broke at run time.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace celltrack
