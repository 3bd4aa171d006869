#pragma once

#include <stdexcept>
#include <string>

namespace mlae {

// Error taxonomy shared by every module. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible matrix/vector dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument value (bad count, probability out of range, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// A public operation produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

// An API contract was violated (non-scalar loss, non-deterministic fn, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Operation not valid in the current object state (double injection, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

// Malformed config, dataset or checkpoint manifest.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Checkpoint blob does not match its manifest hash.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

}  // namespace mlae
