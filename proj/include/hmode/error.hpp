#pragma once

#include <stdexcept>
#include <string>

namespace hmode {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidShape : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A head point or annotation file that cannot be used as supervision.
class AnnotationError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Raised by the trainer when a loss component stops being finite.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace hmode
