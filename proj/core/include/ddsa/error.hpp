#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace ddsa {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent on-disk artifact.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Shapes, layouts or class counts that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A numeric routine produced or received a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Hidden ground-truth label read while a training scope is active.
class LabelLeakError : public Error {
 public:
  using Error::Error;
};

/// A pipeline phase failed. `phase()` names it.
class PhaseError : public Error {
 public:
  PhaseError(std::string phase, const std::string& what)
      : Error("phase '" + phase + "' failed: " + what), phase_(std::move(phase)) {}
  const std::string& phase() const { return phase_; }

 private:
  std::string phase_;
};

}  // namespace ddsa
