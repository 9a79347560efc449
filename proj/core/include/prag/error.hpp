#pragma once

#include <stdexcept>
#include <string>

namespace prag {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor/matrix dimensions disagree with what an operation or model requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or configuration (bad hyperparameter, missing prerequisite).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A persisted file failed validation (bad magic, truncated, checksum mismatch).
class CorruptFileError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Failure talking to an external augmentor or judge service.
class RemoteError : public Error {
 public:
  using Error::Error;
};

}  // namespace prag
