#pragma once

#include <stdexcept>
#include <string>

namespace mixsim {

// Exit codes shared by the command line front end.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 1,
  kModel = 2,
  kNumerical = 3,
};

/// Malformed or inconsistent configuration (bad units, missing fields, violated
/// parameter invariants).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The linearized model is not usable at the requested operating point:
/// negative discriminant, degenerate eigenvalues, wrong traffic regime,
/// singular boundary map.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical procedure did not deliver (kernel iteration did not converge,
/// CFL violated, certification scan exhausted).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class KernelError : public NumericalError {
 public:
  KernelError(const std::string& what, double last_residual, int iterations)
      : NumericalError(what), last_residual_(last_residual), iterations_(iterations) {}
  double last_residual() const { return last_residual_; }
  int iterations() const { return iterations_; }

 private:
  double last_residual_;
  int iterations_;
};

}  // namespace mixsim
