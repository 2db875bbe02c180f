#pragma once

// Propagation-of-chaos rate curves.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mfchaos/errors.hpp"

namespace mfchaos {

/// Wasserstein sampling rate eps(N) for k-th moments in dimension d with
/// initial moments up to order q (q = +inf drops the moment-tail term).
///
///   k > d/2:      N^{-1/2}            + N^{-(q-k)/q},   q != 2k
///   k = d/2:      N^{-1/2} log(1 + N) + N^{-(q-k)/q},   q != 2k
///   0 < k < d/2:  N^{-k/d}            + N^{-(q-k)/q},   q != d/(d-k)
inline double epsilon_rate(double N, double k, int d, double q) {
  if (!(N >= 1.0) || !std::isfinite(N)) throw ParameterError("epsilon_rate: N must be a finite value >= 1");
  if (!(k > 0.0) || !std::isfinite(k)) throw ParameterError("epsilon_rate: k must be positive");
  if (d <= 0) throw ParameterError("epsilon_rate: d must be positive");
  if (!(q > k)) throw ParameterError("epsilon_rate: q must exceed k");
  const double dd = static_cast<double>(d);
  const bool finite_q = std::isfinite(q);
  const double tail = finite_q ? std::pow(N, -(q - k) / q) : 0.0;
  if (2.0 * k > dd) {
    if (finite_q && q == 2.0 * k)
      throw UnsupportedParametersError("epsilon_rate: q = 2k is excluded when k > d/2 (side condition q != 2k)");
    return std::pow(N, -0.5) + tail;
  }
  if (2.0 * k == dd) {
    if (finite_q && q == 2.0 * k)
      throw UnsupportedParametersError("epsilon_rate: q = 2k is excluded when k = d/2 (side condition q != 2k)");
    return std::pow(N, -0.5) * std::log1p(N) + tail;
  }
  if (finite_q && q == dd / (dd - k))
    throw UnsupportedParametersError("epsilon_rate: q = d/(d-k) is excluded when k < d/2 (side condition q != d/(d-k))");
  return std::pow(N, -k / dd) + tail;
}

/// alpha * min((q - k) / (m + alpha q), 1); at q = +inf the ratio tends to
/// 1/alpha, giving min(1, alpha).
inline double theoretical_exponent(double alpha, double q, double k, double m) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ParameterError("theoretical_exponent: alpha must lie in (0, 1]");
  if (!(k >= 2.0) || !std::isfinite(k)) throw ParameterError("theoretical_exponent: k must be >= 2");
  if (!(q > k)) throw ParameterError("theoretical_exponent: q must exceed k");
  if (!(m >= 0.0) || !std::isfinite(m)) throw ParameterError("theoretical_exponent: m must be >= 0");
  if (!std::isfinite(q)) return alpha * std::min(1.0 / alpha, 1.0);
  return alpha * std::min((q - k) / (m + alpha * q), 1.0);
}

/// Local log-log slope of eps(N)^p between N and 2N, the reference slope a
/// measured ladder is compared with.
inline double theory_slope(double N_lo, double N_hi, double k, int d, double q, double power) {
  const double a = std::log(epsilon_rate(N_lo, k, d, q)), b = std::log(epsilon_rate(N_hi, k, d, q));
  return power * (b - a) / (std::log(N_hi) - std::log(N_lo));
}

}  // namespace mfchaos
