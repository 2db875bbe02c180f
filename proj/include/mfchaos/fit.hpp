#pragma once

// Weighted log-log slope fits for convergence ladders.

#include <cmath>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "mfchaos/errors.hpp"

namespace mfchaos {

struct FitPoint {
  double N = 0.0;
  double moment = 0.0;
  double std_error = 0.0;
};

struct FitResult {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double reduced_chi2 = 0.0;
  std::size_t points_used = 0;
  bool weighted = false;
  std::vector<std::string> warnings;
};

/// Least squares of log(moment) on log(N). Points with moment <= 0 are
/// dropped (with a warning). When every point carries a positive standard
/// error the weights are (moment / std_error)^2, i.e. inverse delta-method
/// variances of log(moment), and the covariance is inflated by the reduced
/// chi-square when that exceeds one; otherwise unit weights and the residual
/// variance are used. The interval is Student-t with n - 2 degrees of freedom.
inline FitResult fit_rate(const std::vector<FitPoint>& points, double confidence = 0.95) {
  FitResult out;
  std::vector<FitPoint> kept;
  for (const auto& p : points) {
    if (!(p.moment > 0.0) || !std::isfinite(p.moment) || !(p.N > 0.0)) {
      out.warnings.push_back("dropped point N = " + std::to_string(p.N) + " with non-positive moment");
      continue;
    }
    kept.push_back(p);
  }
  if (kept.size() < 3)
    throw FitError("fit_rate: need at least 3 points with positive moments, have " + std::to_string(kept.size()));
  bool weighted = true;
  for (const auto& p : kept) weighted = weighted && p.std_error > 0.0 && std::isfinite(p.std_error);
  out.weighted = weighted;

  const std::size_t n = kept.size();
  std::vector<double> x(n), y(n), w(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::log(kept[i].N);
    y[i] = std::log(kept[i].moment);
    w[i] = weighted ? (kept[i].moment / kept[i].std_error) * (kept[i].moment / kept[i].std_error) : 1.0;
  }
  double sw = 0.0, sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sw += w[i];
    sx += w[i] * x[i];
    sy += w[i] * y[i];
  }
  const double xm = sx / sw, ym = sy / sw;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += w[i] * (x[i] - xm) * (x[i] - xm);
    sxy += w[i] * (x[i] - xm) * (y[i] - ym);
  }
  if (!(sxx > 0.0)) throw FitError("fit_rate: ladder has a single distinct N");
  out.slope = sxy / sxx;
  out.intercept = ym - out.slope * xm;
  double chi2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - out.intercept - out.slope * x[i];
    chi2 += w[i] * r * r;
  }
  const double dof = static_cast<double>(n - 2);
  out.reduced_chi2 = chi2 / dof;
  const double scale = weighted ? std::max(1.0, out.reduced_chi2) : out.reduced_chi2;
  out.slope_se = std::sqrt(scale / sxx);
  const boost::math::students_t dist(dof);
  const double tq = boost::math::quantile(dist, 0.5 + 0.5 * confidence);
  out.ci_low = out.slope - tq * out.slope_se;
  out.ci_high = out.slope + tq * out.slope_se;
  out.points_used = n;
  return out;
}

}  // namespace mfchaos
