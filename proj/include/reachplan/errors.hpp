#pragma once

#include <stdexcept>
#include <string>

namespace reachplan {

/// Input outside an operation's contract (bounds, shapes, mismatched systems).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values produced while stepping a solver or training a network.
class NumericalFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A requested computation would exceed a configured resource cap.
class ResourceRefused : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent on-disk artifact.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, MalformedHeader, ShapeMismatch, TruncatedBlob, SystemMismatch, Io };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace reachplan
