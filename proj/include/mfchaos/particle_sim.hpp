#pragma once

// Euler-Maruyama for the N-particle mean-field system, its synchronously
// coupled limit copies driven by a frozen law, and the reference runs that
// produce that law.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "mfchaos/errors.hpp"
#include "mfchaos/measures.hpp"
#include "mfchaos/models.hpp"
#include "mfchaos/noise.hpp"

namespace mfchaos {

inline constexpr double kDivergenceThreshold = 1e12;

/// I.i.d. per-coordinate initial law. Draw i depends only on (seed, i), so
/// initial clouds are prefix-stable across N.
struct InitialLaw {
  enum class Kind { kPoint, kUniform, kNormal, kStudentT };
  Kind kind = Kind::kUniform;
  double p1 = -1.0;  // point value | lower bound | mean | degrees of freedom
  double p2 = 1.0;   // unused      | upper bound | sd   | scale

  static InitialLaw point(double x0) { return {Kind::kPoint, x0, 0.0}; }
  static InitialLaw uniform(double lo, double hi) {
    if (!(hi > lo)) throw ParameterError("InitialLaw::uniform: need lo < hi");
    return {Kind::kUniform, lo, hi};
  }
  static InitialLaw normal(double mean, double sd) {
    if (!(sd > 0.0)) throw ParameterError("InitialLaw::normal: sd must be positive");
    return {Kind::kNormal, mean, sd};
  }
  static InitialLaw student_t(double nu, double scale) {
    if (!(nu > 0.0) || !(scale > 0.0)) throw ParameterError("InitialLaw::student_t: nu and scale must be positive");
    return {Kind::kStudentT, nu, scale};
  }

  double mean() const {
    switch (kind) {
      case Kind::kPoint: return p1;
      case Kind::kUniform: return 0.5 * (p1 + p2);
      case Kind::kNormal: return p1;
      case Kind::kStudentT: return p1 > 1.0 ? 0.0 : std::numeric_limits<double>::quiet_NaN();
    }
    return 0.0;
  }
  double variance() const {
    switch (kind) {
      case Kind::kPoint: return 0.0;
      case Kind::kUniform: return (p2 - p1) * (p2 - p1) / 12.0;
      case Kind::kNormal: return p2 * p2;
      case Kind::kStudentT:
        return p1 > 2.0 ? p2 * p2 * p1 / (p1 - 2.0) : std::numeric_limits<double>::infinity();
    }
    return 0.0;
  }
  /// Supremum of finite moment orders (the q of the rate theory).
  double moment_order() const {
    if (kind == Kind::kStudentT) return p1;
    if (kind == Kind::kNormal) return std::numeric_limits<double>::infinity();
    return std::numeric_limits<double>::infinity();
  }
  bool bounded() const { return kind == Kind::kPoint || kind == Kind::kUniform; }

  void sample(std::uint64_t seed, std::size_t index, std::span<double> out) const {
    const CounterStream rng(seed, index);
    for (std::size_t c = 0; c < out.size(); c += 2) {
      const auto blk = static_cast<std::uint32_t>(c / 2);
      std::array<double, 2> v{};
      switch (kind) {
        case Kind::kPoint: v = {p1, p1}; break;
        case Kind::kUniform: {
          const auto u = rng.uniforms(0, Channel::kInitial, blk);
          v = {p1 + (p2 - p1) * u[0], p1 + (p2 - p1) * u[1]};
          break;
        }
        case Kind::kNormal: {
          const auto z = rng.normals(0, Channel::kInitial, blk);
          v = {p1 + p2 * z[0], p1 + p2 * z[1]};
          break;
        }
        case Kind::kStudentT: {
          const auto u = rng.uniforms(0, Channel::kInitial, blk);
          const boost::math::students_t dist(p1);
          v = {p2 * boost::math::quantile(dist, u[0]), p2 * boost::math::quantile(dist, u[1])};
          break;
        }
      }
      out[c] = v[0];
      if (c + 1 < out.size()) out[c + 1] = v[1];
    }
  }
};

/// N x d initial positions; row i is InitialLaw::sample(seed, i).
inline std::vector<double> sample_initial(const InitialLaw& law, std::uint64_t seed, std::size_t n, int d) {
  std::vector<double> xs(n * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < n; ++i)
    law.sample(seed, i, std::span<double>(xs.data() + i * static_cast<std::size_t>(d), static_cast<std::size_t>(d)));
  return xs;
}

/// Positions of N particles at grid node `node`.
struct ParticleCloud {
  int d = 1;
  int node = 0;
  std::vector<double> x;

  std::size_t size() const { return x.size() / static_cast<std::size_t>(d); }
  std::span<const double> point(std::size_t i) const {
    return {x.data() + i * static_cast<std::size_t>(d), static_cast<std::size_t>(d)};
  }
  EmpiricalMeasure measure() const { return EmpiricalMeasure(x, d); }
};

namespace detail {

inline void check_bank(const NoiseBank& bank, const TimeGrid& grid, std::size_t n, int m) {
  if (bank.n_particles() < n)
    throw DimensionError("noise bank has " + std::to_string(bank.n_particles()) + " streams, need " +
                         std::to_string(n));
  if (bank.n_steps() != grid.n_steps || std::abs(bank.dt() - grid.dt()) > 1e-15 * grid.T)
    throw DimensionError("noise bank time grid differs from the simulation grid");
  if (bank.m() != m) throw DimensionError("noise bank Brownian dimension differs from the model");
}

[[noreturn, gnu::cold, gnu::noinline]] inline void throw_divergence(double v, std::size_t particle, int node,
                                                                    const char* what) {
  throw DivergenceError(std::string(what) + " diverged: particle " + std::to_string(particle) + " at node " +
                        std::to_string(node) + " (value " + std::to_string(v) + ")");
}

inline void check_finite(double v, std::size_t particle, int node, const char* what) {
  if (!std::isfinite(v) || std::abs(v) > kDivergenceThreshold) throw_divergence(v, particle, node, what);
}

/// x_out = x + b dt + sigma dW for every row, with psi fixed for the step.
template <MeanFieldModel M>
void euler_positions(const M& model, double t, double dt, std::span<const double> psi, std::span<const double> xs,
                     std::size_t n, const NoiseBank& bank, int step, std::span<double> out, Jet& jet,
                     const char* what, int node_after) {
  const auto d = static_cast<std::size_t>(model.dim());
  const auto m = static_cast<std::size_t>(model.noise_dim());
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = xs.subspan(i * d, d);
    model.jet(t, x, psi, jet);
    const auto dw = bank.increment(i, step);
    for (std::size_t r = 0; r < d; ++r) {
      double v = x[r] + jet.drift[r] * dt;
      for (std::size_t c = 0; c < m; ++c) v += jet.diffusion[r * m + c] * dw[c];
      check_finite(v, i, node_after, what);
      out[i * d + r] = v;
    }
  }
}

}  // namespace detail

/// One explicit Euler-Maruyama step of the interacting system. The empirical
/// measure of the pre-step positions drives every particle.
template <MeanFieldModel M>
ParticleCloud step_particles(const M& model, ParticleCloud cloud, const NoiseBank& bank, const TimeGrid& grid) {
  if (cloud.node >= grid.n_steps) throw ParameterError("step_particles: cloud is already at the final node");
  if (cloud.d != model.dim()) throw DimensionError("step_particles: cloud dimension differs from model");
  const std::size_t n = cloud.size();
  detail::check_bank(bank, grid, n, model.noise_dim());
  const auto psi = feature_mean(model, cloud.x, n);
  Jet jet;
  jet.resize(model.dim(), model.noise_dim(), model.feature_dim());
  std::vector<double> next(cloud.x.size());
  detail::euler_positions(model, grid.t(cloud.node), grid.dt(), psi, cloud.x, n, bank, cloud.node, next, jet,
                          "particle", cloud.node + 1);
  cloud.x = std::move(next);
  ++cloud.node;
  return cloud;
}

/// Per-node proxy for the law of the limit equation: feature means at every
/// node, and optionally the full point clouds.
struct FrozenLaw {
  int d = 1;
  int p = 1;
  std::size_t M = 0;
  TimeGrid grid;
  std::vector<double> features;   // nodes x p
  std::vector<double> positions;  // nodes x M x d, empty unless stored

  bool has_positions() const { return !positions.empty(); }
  std::span<const double> features_at(int node) const {
    return {features.data() + static_cast<std::size_t>(node) * static_cast<std::size_t>(p), static_cast<std::size_t>(p)};
  }
  std::span<const double> positions_at(int node) const {
    if (!has_positions()) throw ConfigError("FrozenLaw: positions were not stored");
    const std::size_t len = M * static_cast<std::size_t>(d);
    return {positions.data() + static_cast<std::size_t>(node) * len, len};
  }
  EmpiricalMeasure at(int node) const {
    const auto s = positions_at(node);
    return EmpiricalMeasure(std::vector<double>(s.begin(), s.end()), d);
  }
};

struct ReferenceOptions {
  std::size_t min_size = 1;
  bool store_positions = true;
  std::uint64_t init_seed = 0;
};

/// Large-M run of the interacting system on an independent bank; its
/// empirical flow stands in for the limit law. Starts from explicit initial
/// positions (M x d).
template <MeanFieldModel M>
FrozenLaw run_reference_from(const M& model, std::vector<double> x0, const NoiseBank& bank_ref, const TimeGrid& grid,
                             bool store_positions = true) {
  const std::size_t M_count = x0.size() / static_cast<std::size_t>(model.dim());
  detail::check_bank(bank_ref, grid, M_count, model.noise_dim());
  FrozenLaw law;
  law.d = model.dim();
  law.p = model.feature_dim();
  law.M = M_count;
  law.grid = grid;
  const auto nodes = static_cast<std::size_t>(grid.nodes());
  law.features.resize(nodes * static_cast<std::size_t>(law.p));
  if (store_positions) law.positions.resize(nodes * M_count * static_cast<std::size_t>(law.d));

  ParticleCloud cloud{law.d, 0, std::move(x0)};
  Jet jet;
  jet.resize(model.dim(), model.noise_dim(), model.feature_dim());
  std::vector<double> next(cloud.x.size());
  for (int n = 0;; ++n) {
    const auto psi = feature_mean(model, cloud.x, M_count);
    std::copy(psi.begin(), psi.end(), law.features.begin() + static_cast<std::ptrdiff_t>(n * law.p));
    if (store_positions)
      std::copy(cloud.x.begin(), cloud.x.end(),
                law.positions.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(n) * cloud.x.size()));
    if (n == grid.n_steps) break;
    detail::euler_positions(model, grid.t(n), grid.dt(), psi, cloud.x, M_count, bank_ref, n, next, jet, "reference",
                            n + 1);
    std::swap(cloud.x, next);
  }
  return law;
}

/// Same as run_reference_from with M initial draws from `init`.
template <MeanFieldModel M>
FrozenLaw run_reference(const M& model, std::size_t M_count, const NoiseBank& bank_ref, const TimeGrid& grid,
                        const InitialLaw& init, const ReferenceOptions& opt = {}) {
  if (M_count < opt.min_size)
    throw ParameterError("run_reference: M = " + std::to_string(M_count) + " is below the floor " +
                         std::to_string(opt.min_size));
  return run_reference_from(model, sample_initial(init, opt.init_seed, M_count, model.dim()), bank_ref, grid,
                            opt.store_positions);
}

/// Closed-form limit moments of mf_ou started from `init`: per coordinate
/// mean m0 e^{(a+b)t} and variance e^{2at} v0 + s^2 (e^{2at} - 1) / (2a).
inline double ou_mean(const MfOu& ou, const InitialLaw& init, double t) { return init.mean() * std::exp((ou.a + ou.b) * t); }
inline double ou_noise_variance(const MfOu& ou, double t) {
  return ou.a == 0.0 ? ou.sigma * ou.sigma * t : ou.sigma * ou.sigma * std::expm1(2.0 * ou.a * t) / (2.0 * ou.a);
}
inline double ou_variance(const MfOu& ou, const InitialLaw& init, double t) {
  return std::exp(2.0 * ou.a * t) * init.variance() + ou_noise_variance(ou, t);
}

/// Exact limit law of mf_ou: features are the closed-form means and the
/// positions are exact transition samples
///   X_t = e^{at} X_0 + m0 (e^{(a+b)t} - e^{at}) + Normal(0, noise variance).
inline FrozenLaw ou_limit_law(const MfOu& ou, const InitialLaw& init, const TimeGrid& grid, std::size_t M_count,
                              std::uint64_t seed, bool store_positions = true) {
  FrozenLaw law;
  law.d = ou.d;
  law.p = ou.d;
  law.M = M_count;
  law.grid = grid;
  const auto nodes = static_cast<std::size_t>(grid.nodes());
  const auto d = static_cast<std::size_t>(ou.d);
  law.features.resize(nodes * d);
  const auto x0 = sample_initial(init, seed, M_count, ou.d);
  std::vector<double> z(M_count * d);
  for (std::size_t i = 0; i < M_count; ++i)
    CounterStream(seed, i).fill_normals(0, Channel::kBrownian, std::span<double>(z.data() + i * d, d));
  if (store_positions) law.positions.resize(nodes * M_count * d);
  const double m0 = init.mean();
  for (std::size_t n = 0; n < nodes; ++n) {
    const double t = grid.t(static_cast<int>(n));
    const double ea = std::exp(ou.a * t), eab = std::exp((ou.a + ou.b) * t);
    for (std::size_t c = 0; c < d; ++c) law.features[n * d + c] = m0 * eab;
    if (!store_positions) continue;
    const double sd = std::sqrt(ou_noise_variance(ou, t));
    for (std::size_t i = 0; i < M_count * d; ++i)
      law.positions[n * M_count * d + i] = ea * x0[i] + m0 * (eab - ea) + sd * z[i];
  }
  return law;
}

/// Limit copies X^i driven by the frozen law and the same streams as the
/// interacting particles.
struct LimitCloud {
  ParticleCloud copies;
  std::shared_ptr<const FrozenLaw> law;
};

template <MeanFieldModel M>
LimitCloud step_limit_copies(const M& model, LimitCloud limit, const NoiseBank& bank, const TimeGrid& grid) {
  if (!limit.law) throw ConfigError("step_limit_copies: no frozen law attached");
  const int node = limit.copies.node;
  if (node >= grid.n_steps) throw ParameterError("step_limit_copies: copies are already at the final node");
  if (limit.law->grid.n_steps != grid.n_steps) throw DimensionError("step_limit_copies: frozen law grid differs");
  const std::size_t n = limit.copies.size();
  detail::check_bank(bank, grid, n, model.noise_dim());
  Jet jet;
  jet.resize(model.dim(), model.noise_dim(), model.feature_dim());
  std::vector<double> next(limit.copies.x.size());
  detail::euler_positions(model, grid.t(node), grid.dt(), limit.law->features_at(node), limit.copies.x, n, bank, node,
                          next, jet, "limit copy", node + 1);
  limit.copies.x = std::move(next);
  ++limit.copies.node;
  return limit;
}

/// Indices of a seeded size-n subsample (without replacement) of [0, M).
inline std::vector<std::size_t> seeded_subsample(std::size_t M_count, std::size_t n, std::uint64_t seed) {
  if (n > M_count) throw ParameterError("seeded_subsample: requested more points than available");
  std::vector<std::size_t> idx(M_count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const CounterStream rng(seed, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = rng.bits(i, Channel::kSubsample);
    const std::size_t j = i + static_cast<std::size_t>(b[0] % (M_count - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  return idx;
}

struct MetricsConfig {
  double k = 2.0;
  bool wasserstein = true;
  std::uint64_t subsample_seed = 0;
};

/// Running sup-gaps |X^{i,N}_t - X^i_t| per particle and W_k(muhat^N_t, mu_t)
/// per visited node.
struct PathStats {
  std::vector<double> sup_gap;  // per particle, running max over nodes
  std::vector<double> wk;       // per node, W_k against the frozen law
  std::vector<std::size_t> subsample;

  double max_sup_gap() const { return sup_gap.empty() ? 0.0 : *std::max_element(sup_gap.begin(), sup_gap.end()); }
};

/// Folds the current node into the running statistics. Only d = 1 is
/// supported for the Wasserstein part (exact sorted coupling).
inline void collect_path_stats(const ParticleCloud& particles, const LimitCloud& limits, const MetricsConfig& cfg,
                               PathStats& stats) {
  if (particles.node != limits.copies.node) throw ParameterError("collect_path_stats: time indices differ");
  if (particles.size() != limits.copies.size()) throw DimensionError("collect_path_stats: cloud sizes differ");
  const std::size_t n = particles.size();
  const auto d = static_cast<std::size_t>(particles.d);
  if (stats.sup_gap.empty()) stats.sup_gap.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double g = particles.x[i * d + c] - limits.copies.x[i * d + c];
      s += g * g;
    }
    stats.sup_gap[i] = std::max(stats.sup_gap[i], std::sqrt(s));
  }
  if (!cfg.wasserstein || !limits.law || !limits.law->has_positions()) return;
  if (d != 1) throw DimensionError("collect_path_stats: Wasserstein tracking requires d = 1");
  const auto law_pts = limits.law->positions_at(particles.node);
  if (stats.subsample.size() != n) stats.subsample = seeded_subsample(limits.law->M, n, cfg.subsample_seed);
  std::vector<double> a(particles.x), b(n);
  for (std::size_t i = 0; i < n; ++i) b[i] = law_pts[stats.subsample[i]];
  std::stable_sort(a.begin(), a.end());
  std::stable_sort(b.begin(), b.end());
  if (stats.wk.size() <= static_cast<std::size_t>(particles.node))
    stats.wk.resize(static_cast<std::size_t>(particles.node) + 1, 0.0);
  stats.wk[static_cast<std::size_t>(particles.node)] = wasserstein_1d_sorted(a, b, cfg.k);
}

}  // namespace mfchaos
