#pragma once

#include <stdexcept>
#include <string>

namespace decontext {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared in an input, activation or gradient.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// An index, timestep or parameter lies outside its valid range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autodiff graph (non-scalar loss, repeated backward, foreign variables).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// File could not be read, written or parsed.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training diverged; the last good checkpoint has been written.
class DivergenceError : public NonFiniteError {
 public:
  using NonFiniteError::NonFiniteError;
};

}  // namespace decontext
