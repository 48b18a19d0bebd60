// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace nmil {

// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Operand shapes do not satisfy an operation's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Empty bag or otherwise degenerate input.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// An API precondition unrelated to shapes was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

// An object was used in a state that does not permit the operation.
class StateError : public Error {
 public:
  using Error::Error;
};

// A file's bytes do not match the expected format.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A bag tree does not have the structure an operation requires.
class StructureError : public Error {
 public:
  using Error::Error;
};

// Dataset generation could not satisfy its constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class TrainingDivergenceError : public Error {
 public:
  using Error::Error;
};

// Localization AUC is undefined for the given records.
class UndefinedAucError : public Error {
 public:
  using Error::Error;
};

// Filesystem access failed.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace nmil
