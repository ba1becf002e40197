#pragma once

#include <stdexcept>
#include <string>

namespace bissl {

/// Parameter layouts or tensor shapes that do not line up.
class LayoutError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A non-finite value (overflow, NaN) surfaced in a loss or gradient.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: unknown keys, out-of-range values, too little data.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An embedding row with zero norm was passed to a cosine-similarity loss.
class DegenerateEmbeddingError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// A dense oracle hit a singular (or numerically singular) system.
class SingularMatrixError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace bissl
