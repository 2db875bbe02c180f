#pragma once

#include <stdexcept>
#include <string>

namespace mfchaos {

/// Invalid scalar argument (non-positive step, k < 1, empty input, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Shape mismatch between measures, vectors or banks.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A particle or flow left the finite range during integration.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The model lacks a structural property the operation needs
/// (distribution-free invertible diffusion for the Malliavin and Bismut code).
class UnsupportedModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rate-function inputs outside every branch of the empirical-measure rate.
class UnsupportedParametersError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed experiment configuration or missing precomputed inputs.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Too few usable ladder points for a log-log fit.
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mfchaos
