#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace latentcf {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller passed a value outside an operation's domain (shape, range, count).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Required pieces of a run are missing or inconsistent (no encoder and no
/// inversion budget, missing autoencoder, unknown manifest role, ...).
class ConfigurationError : public Error {
 public:
  using Error::Error;
};

/// An operation was invoked in a mode that does not permit it.
class StateError : public Error {
 public:
  using Error::Error;
};

/// A numerical routine produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Rejection sampling could not collect the requested number of latents.
class BudgetExhaustedError : public Error {
 public:
  BudgetExhaustedError(int64_t accepted, int64_t requested, int64_t draws);

  int64_t accepted() const noexcept { return accepted_; }
  int64_t requested() const noexcept { return requested_; }
  int64_t draws() const noexcept { return draws_; }

 private:
  int64_t accepted_;
  int64_t requested_;
  int64_t draws_;
};

/// Optimization hit a non-finite loss. `iteration` is the step at which it
/// was observed; `detail` carries a loss snapshot when one is available.
class DivergenceError : public Error {
 public:
  DivergenceError(int64_t iteration, const std::string& detail);

  int64_t iteration() const noexcept { return iteration_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  int64_t iteration_;
  std::string detail_;
};

/// A trained backbone fell below its configured accuracy floor.
class QualityGateError : public Error {
 public:
  QualityGateError(const std::string& role, double measured, double floor);

  double measured() const noexcept { return measured_; }
  double floor() const noexcept { return floor_; }

 private:
  double measured_;
  double floor_;
};

}  // namespace latentcf
