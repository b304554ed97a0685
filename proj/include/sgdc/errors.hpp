#pragma once

#include <stdexcept>
#include <string>

namespace sgdc {

// Base for every error the library raises. The CLI maps the subclasses onto
// exit codes: validation-type errors exit 1, runtime/numeric errors exit 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition (even unfold kernel, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace sgdc
