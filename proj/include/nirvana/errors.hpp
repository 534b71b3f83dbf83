// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace nirvana {

/// Extents of two operands (or of an operand and a state) disagree.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A tensor that must be scalar (or of a fixed rank) is not.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Non-finite value where the caller asked for checked construction.
struct NonFiniteError : std::domain_error {
  using std::domain_error::domain_error;
};

/// A memory rule was stepped without one of the gates it reads.
struct GateError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct UnsupportedOpError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A synthetic task cannot be laid out in the requested sequence length.
struct LayoutError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace nirvana
