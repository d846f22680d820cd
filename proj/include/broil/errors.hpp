#pragma once

#include <stdexcept>
#include <string>

namespace broil {

// Error hierarchy. The CLI maps ConfigError to exit code 1 and every other
// broil::Error to exit code 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid argument to a numerical routine (alpha out of range, bad distribution).
struct ParameterError : Error {
  using Error::Error;
};

// Malformed data (dimension mismatch, bad indices).
struct DataError : Error {
  using Error::Error;
};

// API misuse (stepping a finished episode, empty batch).
struct UsageError : Error {
  using Error::Error;
};

// Non-finite values produced during training.
struct NumericalError : Error {
  using Error::Error;
};

// Posterior inference could not run on the given data.
struct InferenceError : Error {
  using Error::Error;
};

// Invalid or unreadable configuration, detected before any training.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace broil
