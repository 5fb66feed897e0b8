#pragma once

// Error taxonomy for the trial engine.
//
// Construction-time validation failures are hard errors, never warnings:
// a scenario or design whose probability rows do not sum to one indicates a
// bug upstream, and silent renormalization would mask it.  Enumeration
// refusals (BudgetError) are likewise explicit so callers can fall back to
// Monte Carlo deliberately rather than by accident.

#include <stdexcept>
#include <string>

namespace nettrial {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Invariant violated at construction or call time (bad probability row,
// out-of-range index, malformed config...).
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(what) {}
};

// Exact enumeration would exceed the configured weighted-path budget.
// Callers must switch to a Monte Carlo backend explicitly.
class BudgetError : public Error {
 public:
  explicit BudgetError(const std::string& what) : Error(what) {}
};

// Operation not defined for the given scenario/model class or estimator
// configuration (e.g. forward rollouts on a scenario without a
// context-Markov structure).
class UnsupportedError : public Error {
 public:
  explicit UnsupportedError(const std::string& what) : Error(what) {}
};

// A density ratio hit a zero-probability denominator on a realized path.
class PositivityError : public Error {
 public:
  explicit PositivityError(const std::string& what) : Error(what) {}
};

// Data does not fit the scenario's declared supports or context tables.
class ModelMismatchError : public Error {
 public:
  explicit ModelMismatchError(const std::string& what) : Error(what) {}
};

}  // namespace nettrial
