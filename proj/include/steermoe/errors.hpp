#pragma once

#include <stdexcept>
#include <string>

namespace steermoe {

// Shapes of operands are incompatible.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A sequence exceeds a configured maximum length.
struct LengthError : std::length_error {
  using std::length_error::length_error;
};

// An operation received an empty input it cannot reduce over.
struct EmptyInputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Caller violated an API precondition (e.g. backward on a non-scalar).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// NaN/Inf encountered, divergence, or a non-deterministic forward.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A pretraining run produced a backbone too weak to be useful.
struct PretrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file, bad version, unknown config key.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace steermoe
