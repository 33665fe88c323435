#pragma once

#include <stdexcept>
#include <string>

namespace somnoscore {

// Base class for all library errors. The CLI maps subclasses onto exit
// codes: configuration/usage -> 2, data integrity -> 3, runtime -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// --- configuration / usage ---------------------------------------------

class BadArg : public Error {
 public:
  using Error::Error;
};

class BadSpec : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DuplicatePatient : public Error {
 public:
  using Error::Error;
};

// --- data integrity ------------------------------------------------------

class FormatError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class MissingChannel : public Error {
 public:
  using Error::Error;
};

class ExcludedEpoch : public Error {
 public:
  using Error::Error;
};

class BadIndex : public Error {
 public:
  using Error::Error;
};

class NoData : public Error {
 public:
  using Error::Error;
};

// --- runtime -------------------------------------------------------------

class ShapeError : public Error {
 public:
  using Error::Error;
};

class TapeConsumed : public Error {
 public:
  using Error::Error;
};

class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

// Thrown when a metric is undefined for the given matrix (e.g. chance
// agreement of 1). The message carries the observed agreement so callers
// can still report it.
class Degenerate : public Error {
 public:
  using Error::Error;
};

}  // namespace somnoscore
