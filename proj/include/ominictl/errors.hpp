#pragma once

#include <stdexcept>
#include <string>

namespace omini {

// Shape or extent mismatch between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid model / run / adapter configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Position policy that would overlap condition and image indices.
struct PolicyError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation (e.g. gamma < 0).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Operation called on an object in the wrong state (e.g. positions unassigned).
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

// Missing or inconsistent call arguments.
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN or Inf produced by a forward op, or a non-finite training loss.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or incompatible serialized artifact.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace omini
