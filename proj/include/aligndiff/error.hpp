#pragma once

#include <stdexcept>
#include <string>

namespace aligndiff {

/// Invalid configuration value or combination.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Tensor shapes that do not line up.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A coefficient of the form sqrt(a)/sqrt(1-a) with a == 1.
struct SingularCoefficientError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Regression target with zero variance.
struct DegenerateTargetError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Fewer observations than regression parameters require.
struct UnderdeterminedError : std::domain_error {
  using std::domain_error::domain_error;
};

/// An internal invariant failed (e.g. R^2 decreased when adding a regressor).
struct ConsistencyError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Scene generation could not produce a uniquely referable target.
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed file or wire payload.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace aligndiff
