#pragma once

#include <stdexcept>
#include <string>

namespace gridpose {

struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed input file; carries the 1-based line number of the offending line.
struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line(line) {}
  std::size_t line;
};

struct InsufficientData : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateConfiguration : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NoConsensus : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UndefinedInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gridpose
