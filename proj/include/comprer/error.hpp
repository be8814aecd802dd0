#pragma once

#include <stdexcept>
#include <string>

namespace comprer {

/// Base for every error raised by the library. CLI exit codes are keyed on
/// the concrete subtype (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

/// Input is well-formed but degenerate: zero-norm rows, constant targets,
/// single-class labels.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Embedding batches handed to a contrastive pairing carry the wrong tags.
class PairingError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// NaN or Inf produced by a forward op, a gradient, or an optimizer step.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace comprer
