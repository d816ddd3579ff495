#pragma once

#include <stdexcept>
#include <string>

namespace dpenmt {

// Shape or axis disagreement between tensors.
struct dimension_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Violated API precondition (caller bug, not bad data).
struct contract_error : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid model/run configuration value.
struct config_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed text in an input file.
struct parse_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Inconsistent or unusable user-supplied data (line counts, missing files,
// degenerate batches).
struct input_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dpenmt
