#pragma once

#include <stdexcept>
#include <string>

namespace forgetlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Array shapes do not agree for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Token id or row index outside the addressable range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of an API contract (e.g. backward from a non-scalar node).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// An evaluation stratum ran out of admissible (noun, adj) pairs.
class EvalSetError : public Error {
 public:
  EvalSetError(const std::string& stratum, const std::string& what)
      : Error(what), stratum_(stratum) {}
  const std::string& stratum() const noexcept { return stratum_; }

 private:
  std::string stratum_;
};

/// Checkpoint file is unreadable, truncated or from another version.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace forgetlab
