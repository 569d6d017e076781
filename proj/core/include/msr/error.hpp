#pragma once

#include <stdexcept>
#include <string>

namespace msr {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension/shape mismatches; messages name the offending shapes.
struct ShapeError : Error {
  using Error::Error;
};

// Violated preconditions and broken invariants (weights outside the simplex,
// non-scalar loss, empty sequences, ...).
struct ContractError : Error {
  using Error::Error;
};

// Interface-vector slicing with the wrong raw length.
struct LayoutError : Error {
  using Error::Error;
};

// Historical log store does not cover the requested window.
struct CoverageError : Error {
  using Error::Error;
};

struct CheckpointError : Error {
  enum class Kind { io, bad_magic, bad_version, truncated, corrupt };
  Kind kind;
  CheckpointError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
};

// Raised when a training loss goes non-finite; carries a diagnostic snapshot.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace msr
