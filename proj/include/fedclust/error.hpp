#pragma once

#include <stdexcept>
#include <string>

namespace fedclust {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between arguments.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// Input violated a documented precondition (non-finite values, bad ranges).
class InvalidArgument : public Error {
public:
  using Error::Error;
};

/// Malformed on-disk data (IDX files, checkpoints).
class FormatError : public Error {
public:
  using Error::Error;
};

/// A vector whose norm is too small to normalize.
class DegenerateInput : public Error {
public:
  using Error::Error;
};

/// A configuration document failed validation. `path` is a JSON pointer.
class ConfigError : public Error {
public:
  ConfigError(std::string path, const std::string& what)
      : Error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

private:
  std::string path_;
};

} // namespace fedclust
