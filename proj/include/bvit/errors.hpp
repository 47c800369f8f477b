#pragma once

#include <stdexcept>
#include <string>

namespace bvit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor dimensions do not satisfy an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A model or layer configuration violates a structural constraint.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A scalar parameter is outside its valid domain (e.g. alpha_p <= 0).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Persistent layer state is corrupt (e.g. negative running variance).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed user-supplied description (capability chains, images).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Broken internal invariant, e.g. backward called without a recorded forward.
class InternalError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  enum class Kind { io, bad_magic, bad_version, truncated, unknown_tensor, missing_tensor, bad_tensor, bad_config };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace bvit
