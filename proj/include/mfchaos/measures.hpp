#pragma once

// Uniform-weight empirical measures, exact Wasserstein distances between
// equal-size clouds, and Monte Carlo moment estimators.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mfchaos/errors.hpp"

namespace mfchaos {

/// Point cloud with implicit weights 1/N. Points are stored row-major
/// (point i occupies [i*d, (i+1)*d)).
class EmpiricalMeasure {
 public:
  EmpiricalMeasure(std::vector<double> flat, int d) : data_(std::move(flat)), d_(d) {
    if (d_ <= 0) throw DimensionError("EmpiricalMeasure: dimension must be positive");
    if (data_.empty()) throw ParameterError("EmpiricalMeasure: point list is empty");
    if (data_.size() % static_cast<std::size_t>(d_) != 0)
      throw DimensionError("EmpiricalMeasure: flat size is not a multiple of d");
  }

  explicit EmpiricalMeasure(const std::vector<std::vector<double>>& points) : d_(0) {
    if (points.empty()) throw ParameterError("EmpiricalMeasure: point list is empty");
    d_ = static_cast<int>(points.front().size());
    if (d_ == 0) throw DimensionError("EmpiricalMeasure: zero-dimensional point");
    data_.reserve(points.size() * points.front().size());
    for (const auto& p : points) {
      if (static_cast<int>(p.size()) != d_)
        throw DimensionError("EmpiricalMeasure: points have differing dimensions");
      data_.insert(data_.end(), p.begin(), p.end());
    }
  }

  /// Convenience for d = 1.
  static EmpiricalMeasure scalar(std::vector<double> xs) { return EmpiricalMeasure(std::move(xs), 1); }

  int dim() const { return d_; }
  std::size_t size() const { return data_.size() / static_cast<std::size_t>(d_); }
  std::span<const double> point(std::size_t i) const {
    return {data_.data() + i * static_cast<std::size_t>(d_), static_cast<std::size_t>(d_)};
  }
  std::span<const double> flat() const { return data_; }

  std::vector<double> mean() const {
    std::vector<double> m(static_cast<std::size_t>(d_), 0.0);
    for (std::size_t i = 0; i < size(); ++i)
      for (int c = 0; c < d_; ++c) m[static_cast<std::size_t>(c)] += point(i)[static_cast<std::size_t>(c)];
    for (auto& v : m) v /= static_cast<double>(size());
    return m;
  }

 private:
  std::vector<double> data_;
  int d_;
};

struct MomentEstimate {
  double order = 1.0;
  double value = 0.0;
  std::size_t replication_count = 0;
  double std_error = 0.0;
};

namespace detail {

inline void check_order(double k) {
  if (!(k >= 1.0) || !std::isfinite(k)) throw ParameterError("Wasserstein order k must be >= 1, got " + std::to_string(k));
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    const double t = a[c] - b[c];
    s += t * t;
  }
  return std::sqrt(s);
}

inline double pow_abs(double x, double k) {
  x = std::abs(x);
  if (k == 1.0) return x;
  if (k == 2.0) return x * x;
  return std::pow(x, k);
}

}  // namespace detail

/// ((1/N) sum_i |x_i - y_i|^k)^(1/k) for an explicit pairing i -> i. This is
/// the coupling upper bound for W_k; it is attained after sorting in d = 1.
inline double paired_cost_root(std::span<const double> xs, std::span<const double> ys, double k) {
  detail::check_order(k);
  if (xs.size() != ys.size()) throw DimensionError("paired_cost_root: size mismatch");
  if (xs.empty()) throw ParameterError("paired_cost_root: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) s += detail::pow_abs(xs[i] - ys[i], k);
  return std::pow(s / static_cast<double>(xs.size()), 1.0 / k);
}

/// Same as wasserstein_1d for inputs that are already sorted ascending.
inline double wasserstein_1d_sorted(std::span<const double> xs, std::span<const double> ys, double k) {
  return paired_cost_root(xs, ys, k);
}

/// Exact W_k between two equal-size one-dimensional empirical measures via
/// the monotone (order-statistics) coupling.
inline double wasserstein_1d(const EmpiricalMeasure& a, const EmpiricalMeasure& b, double k) {
  detail::check_order(k);
  if (a.dim() != 1 || b.dim() != 1) throw DimensionError("wasserstein_1d: both measures must have d = 1");
  if (a.size() != b.size())
    throw DimensionError("wasserstein_1d: sample counts differ (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
  std::vector<double> xs(a.flat().begin(), a.flat().end());
  std::vector<double> ys(b.flat().begin(), b.flat().end());
  std::stable_sort(xs.begin(), xs.end());
  std::stable_sort(ys.begin(), ys.end());
  return wasserstein_1d_sorted(xs, ys, k);
}

inline constexpr std::size_t kAssignmentCap = 512;

/// Minimum-cost perfect matching on a dense n x n cost matrix (row-major).
/// Shortest augmenting path with potentials, O(n^3). Returns assignment
/// row -> column.
inline std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is the virtual source.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

/// Exact W_k between equal-size empirical measures in any dimension by an
/// optimal assignment on the cost |x_i - y_j|^k. Refuses N above `cap`.
inline double wasserstein_assignment(const EmpiricalMeasure& a, const EmpiricalMeasure& b, double k,
                                     std::size_t cap = kAssignmentCap) {
  detail::check_order(k);
  if (a.dim() != b.dim()) throw DimensionError("wasserstein_assignment: dimensions differ");
  if (a.size() != b.size()) throw DimensionError("wasserstein_assignment: sample counts differ");
  const std::size_t n = a.size();
  if (n > cap)
    throw ParameterError("wasserstein_assignment: N = " + std::to_string(n) + " exceeds the exact-assignment cap of " +
                         std::to_string(cap) + " (cost grows as N^3); subsample or use a d = 1 model");
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      cost[i * n + j] = detail::pow_abs(detail::euclidean_distance(a.point(i), b.point(j)), k);
  const auto match = solve_assignment(cost, n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += cost[i * n + match[i]];
  return std::pow(s / static_cast<double>(n), 1.0 / k);
}

/// Mean and standard error of the mean of already-computed non-negative
/// sample values.
inline MomentEstimate mean_estimate(std::span<const double> values, double order = 1.0) {
  if (values.empty()) throw ParameterError("mean_estimate: empty sample list");
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double se = values.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  return {order, mean, values.size(), se};
}

/// Estimate of E|X|^k from vector samples, with the standard error of the mean.
inline MomentEstimate empirical_moment(const std::vector<std::vector<double>>& samples, double k) {
  if (samples.empty()) throw ParameterError("empirical_moment: empty sample list");
  if (!(k >= 1.0)) throw ParameterError("empirical_moment: k must be >= 1");
  std::vector<double> vals;
  vals.reserve(samples.size());
  for (const auto& s : samples) {
    double n2 = 0.0;
    for (double c : s) n2 += c * c;
    vals.push_back(std::pow(std::sqrt(n2), k));
  }
  return mean_estimate(vals, k);
}

}  // namespace mfchaos
