#pragma once

#include <stdexcept>

namespace scbf {

// Bad input: malformed files, dimension mismatches, invalid parameters.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Rejection sampling could not place agents/goals.
struct PlacementError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or other numerical breakdown at runtime.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training loss blew past the divergence guard.
struct TrainingDiverged : NumericError {
  using NumericError::NumericError;
};

// Unreadable or inconsistent checkpoint file.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace scbf
