#pragma once

#include <stdexcept>
#include <string>

namespace mlsae {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad magic, unsupported version, truncated or otherwise malformed file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Shapes that do not agree (vector length, d, n_layers, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Value outside its valid range (layer index, token id, k, ...).
class RangeError : public Error {
 public:
  using Error::Error;
};

/// A numerical precondition failed (zero variance, singular matrix, ...).
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mlsae
