#pragma once

// Directional derivative flows of the particle system and of the limit
// copies, Malliavin directions built from them, and the Malliavin flows
// (own component, cross-component sum, limit flow and the h-hat flow).
//
// All flows are linear and share the explicit Euler convention of the
// position solver: every right-hand side is evaluated at pre-step states.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "mfchaos/errors.hpp"
#include "mfchaos/measures.hpp"
#include "mfchaos/models.hpp"
#include "mfchaos/noise.hpp"
#include "mfchaos/particle_sim.hpp"

namespace mfchaos {

/// Perturbation field phi; the initial direction of particle i is phi(X_0^i).
struct DirectionSpec {
  enum class Kind { kZero, kConstant, kLinear, kTanh, kCustom };
  Kind kind = Kind::kConstant;
  double scale = 1.0;   // constant value | slope | tanh amplitude
  double offset = 0.0;  // intercept of kLinear
  std::function<void(std::span<const double>, std::span<double>)> fn;
  std::string tag = "constant";

  static DirectionSpec zero() { return {Kind::kZero, 0.0, 0.0, {}, "zero"}; }
  static DirectionSpec constant(double c) { return {Kind::kConstant, c, 0.0, {}, "constant"}; }
  static DirectionSpec linear(double slope, double intercept = 0.0) {
    return {Kind::kLinear, slope, intercept, {}, "linear"};
  }
  static DirectionSpec tanh(double amplitude = 1.0) { return {Kind::kTanh, amplitude, 0.0, {}, "tanh"}; }
  static DirectionSpec custom(std::function<void(std::span<const double>, std::span<double>)> f, std::string tag) {
    if (!f) throw ParameterError("DirectionSpec::custom: empty function");
    return {Kind::kCustom, 1.0, 0.0, std::move(f), std::move(tag)};
  }

  void apply(std::span<const double> x, std::span<double> out) const {
    switch (kind) {
      case Kind::kZero:
        for (auto& o : out) o = 0.0;
        return;
      case Kind::kConstant:
        for (auto& o : out) o = scale;
        return;
      case Kind::kLinear:
        for (std::size_t c = 0; c < out.size(); ++c) out[c] = scale * x[c] + offset;
        return;
      case Kind::kTanh:
        for (std::size_t c = 0; c < out.size(); ++c) out[c] = scale * std::tanh(x[c]);
        return;
      case Kind::kCustom: fn(x, out); return;
    }
  }

  bool affine() const { return kind == Kind::kZero || kind == Kind::kConstant || kind == Kind::kLinear; }

  /// E[phi(X_0)] per coordinate; defined for affine fields only.
  double mean_under(const InitialLaw& init) const {
    switch (kind) {
      case Kind::kZero: return 0.0;
      case Kind::kConstant: return scale;
      case Kind::kLinear: return scale * init.mean() + offset;
      default: throw UnsupportedModelError("DirectionSpec: closed-form mean needs an affine field");
    }
  }
};

/// Largest ratio |phi(x)| / (1 + |x|) over the sample points: a spot check of
/// linear growth.
inline double direction_growth_ratio(const DirectionSpec& phi, std::span<const double> pts, int d) {
  const auto dd = static_cast<std::size_t>(d);
  std::vector<double> out(dd);
  double worst = 0.0;
  for (std::size_t i = 0; i + dd <= pts.size(); i += dd) {
    const auto x = pts.subspan(i, dd);
    phi.apply(x, out);
    double nx = 0.0, nf = 0.0;
    for (std::size_t c = 0; c < dd; ++c) {
      nx += x[c] * x[c];
      nf += out[c] * out[c];
    }
    if (!std::isfinite(nf)) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, std::sqrt(nf) / (1.0 + std::sqrt(nx)));
  }
  return worst;
}

inline std::vector<double> initial_directions(const DirectionSpec& phi, std::span<const double> x0, int d) {
  std::vector<double> v(x0.size());
  const auto dd = static_cast<std::size_t>(d);
  for (std::size_t i = 0; i < x0.size(); i += dd) phi.apply(x0.subspan(i, dd), std::span<double>(v.data() + i, dd));
  return v;
}

/// g on [r, T] with g_r = 0 and g_T = 1, tabulated with g' on the grid nodes.
/// Both vanish at nodes t < r.
struct WeightFunction {
  enum class Shape { kLinear, kSin2 };
  Shape shape = Shape::kLinear;
  double r = 0.0;
  TimeGrid grid;
  std::vector<double> g;
  std::vector<double> dg;

  static WeightFunction make(Shape shape, const TimeGrid& grid, double r) {
    if (!(r >= 0.0) || !(r < grid.T)) throw ParameterError("WeightFunction: r must lie in [0, T)");
    WeightFunction w;
    w.shape = shape;
    w.r = r;
    w.grid = grid;
    const double len = grid.T - r;
    for (int n = 0; n < grid.nodes(); ++n) {
      const double t = grid.t(n);
      double gv = 0.0, dv = 0.0;
      if (t >= r) {
        const double s = (t - r) / len;
        if (shape == Shape::kLinear) {
          gv = s;
          dv = 1.0 / len;
        } else {
          const double a = 0.5 * std::numbers::pi * s;
          gv = std::sin(a) * std::sin(a);
          dv = std::numbers::pi / (2.0 * len) * std::sin(2.0 * a);
        }
      }
      w.g.push_back(gv);
      w.dg.push_back(dv);
    }
    w.g.back() = 1.0;
    return w;
  }
  static WeightFunction linear(const TimeGrid& grid, double r) { return make(Shape::kLinear, grid, r); }
  static WeightFunction sin2(const TimeGrid& grid, double r) { return make(Shape::kSin2, grid, r); }

  bool active(int n) const { return grid.t(n) >= r; }
};

/// Node-wise summary of the auxiliary pair ensemble (Xbar, vbar): the feature
/// pairing L_n = mean_m grad psi(Xbar^m) vbar^m and the mean direction.
struct AuxiliaryFlowLaw {
  int d = 1;
  int p = 1;
  std::size_t M = 0;
  TimeGrid grid;
  std::vector<double> pairing;  // nodes x p
  std::vector<double> mean_v;   // nodes x d

  std::span<const double> pairing_at(int node) const {
    return {pairing.data() + static_cast<std::size_t>(node) * static_cast<std::size_t>(p), static_cast<std::size_t>(p)};
  }
};

// ---------------------------------------------------------------------------
// Kernels on precomputed coefficient blocks

namespace detail {

/// Coefficients of every particle of a cloud at one node.
struct JetBlock {
  std::size_t n = 0;
  int d = 1, m = 1, p = 1;
  std::vector<double> drift, dx, dpsi, sig, sig_dx, sig_dpsi;
  std::vector<double> grad_psi;  // n x p x d
  std::vector<double> ssai;      // n x m x d, sigma* a^-1

  std::size_t D() const { return static_cast<std::size_t>(d); }
  std::size_t Mn() const { return static_cast<std::size_t>(m); }
  std::size_t P() const { return static_cast<std::size_t>(p); }
};

inline void put(const std::vector<double>& src, double* dst) {
  if (src.size() == 1)
    *dst = src[0];
  else
    std::copy(src.begin(), src.end(), dst);
}

template <MeanFieldModel M>
void fill_jets(const M& model, double t, std::span<const double> xs, std::size_t n, std::span<const double> psi,
               bool want_grad_psi, bool want_ssai, JetBlock& J) {
  J.n = n;
  J.d = model.dim();
  J.m = model.noise_dim();
  J.p = model.feature_dim();
  const std::size_t d = J.D(), m = J.Mn(), p = J.P();
  J.drift.resize(n * d);
  J.dx.resize(n * d * d);
  J.dpsi.resize(n * d * p);
  J.sig.resize(n * d * m);
  J.sig_dx.clear();
  J.sig_dpsi.clear();
  Jet jet;
  jet.resize(J.d, J.m, J.p);
  std::vector<double> buf(p + p * d);
  if (want_grad_psi) J.grad_psi.resize(n * p * d);
  if (want_ssai) J.ssai.resize(n * m * d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = xs.subspan(i * d, d);
    jet.diffusion_dx.clear();
    jet.diffusion_dpsi.clear();
    model.jet(t, x, psi, jet);
    put(jet.drift, J.drift.data() + i * d);
    put(jet.drift_dx, J.dx.data() + i * d * d);
    put(jet.drift_dpsi, J.dpsi.data() + i * d * p);
    put(jet.diffusion, J.sig.data() + i * d * m);
    if (!jet.diffusion_dx.empty()) {
      if (J.sig_dx.empty()) J.sig_dx.assign(n * d * m * d, 0.0);
      put(jet.diffusion_dx, J.sig_dx.data() + i * d * m * d);
    }
    if (!jet.diffusion_dpsi.empty()) {
      if (J.sig_dpsi.empty()) J.sig_dpsi.assign(n * d * m * p, 0.0);
      put(jet.diffusion_dpsi, J.sig_dpsi.data() + i * d * m * p);
    }
    if (want_grad_psi) {
      model.features(x, buf);
      for (std::size_t e = 0; e < p * d; ++e) J.grad_psi[i * p * d + e] = buf[p + e];
    }
    if (want_ssai) model.sigma_star_a_inv(t, x, std::span<double>(J.ssai.data() + i * m * d, m * d));
  }
}

/// (1/n) sum_j grad psi(x^j) w^j in fixed blocked order.
inline std::vector<double> pairing_mean(const JetBlock& J, std::span<const double> w) {
  const std::size_t d = J.D(), p = J.P();
  std::vector<double> total(p, 0.0), block(p, 0.0);
  constexpr std::size_t kBlock = 256;
  for (std::size_t start = 0; start < J.n; start += kBlock) {
    std::fill(block.begin(), block.end(), 0.0);
    const std::size_t stop = std::min(J.n, start + kBlock);
    for (std::size_t j = start; j < stop; ++j)
      for (std::size_t q = 0; q < p; ++q) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += J.grad_psi[(j * p + q) * d + c] * w[j * d + c];
        block[q] += s;
      }
    for (std::size_t q = 0; q < p; ++q) total[q] += block[q];
  }
  for (auto& v : total) v /= static_cast<double>(J.n);
  return total;
}

inline void euler_positions_from(const JetBlock& J, std::span<const double> xs, double dt, const NoiseBank& bank,
                                 int step, std::span<double> out, const char* what, int node_after) {
  const std::size_t d = J.D(), m = J.Mn();
  for (std::size_t i = 0; i < J.n; ++i) {
    const auto dw = bank.increment(i, step);
    for (std::size_t r = 0; r < d; ++r) {
      double v = xs[i * d + r] + J.drift[i * d + r] * dt;
      for (std::size_t c = 0; c < m; ++c) v += J.sig[(i * d + r) * m + c] * dw[c];
      check_finite(v, i, node_after, what);
      out[i * d + r] = v;
    }
  }
}

/// Which particles receive the Malliavin source term.
struct Source {
  enum class Kind { kNone, kAll, kOnly, kAllBut };
  Kind kind = Kind::kAll;
  std::size_t l = 0;
  bool includes(std::size_t i) const {
    switch (kind) {
      case Kind::kNone: return false;
      case Kind::kAll: return true;
      case Kind::kOnly: return i == l;
      case Kind::kAllBut: return i != l;
    }
    return false;
  }
};

/// One Euler step of a linear flow
///   dw^i = [grad b(x^i) w^i + d_Psi b(x^i) S + coef src^i] dt
///        + [grad sigma(x^i) w^i + d_Psi sigma(x^i) S] dW^i,
/// where S is an interaction pairing (empty for none) and src is gated by sel.
inline void flow_step(const JetBlock& J, std::span<const double> w, std::span<const double> S,
                      std::span<const double> src, double coef, Source sel, double dt, const NoiseBank& bank, int step,
                      std::span<double> out, const char* what, int node_after) {
  const std::size_t d = J.D(), m = J.Mn(), p = J.P();
  const bool inter = !S.empty();
  std::vector<double> diff(m);
  for (std::size_t i = 0; i < J.n; ++i) {
    const auto dw = bank.increment(i, step);
    const bool with_src = !src.empty() && sel.includes(i);
    for (std::size_t r = 0; r < d; ++r) {
      double drift = 0.0;
      for (std::size_t c = 0; c < d; ++c) drift += J.dx[(i * d + r) * d + c] * w[i * d + c];
      if (inter)
        for (std::size_t q = 0; q < p; ++q) drift += J.dpsi[(i * d + r) * p + q] * S[q];
      if (with_src) drift += coef * src[i * d + r];
      double v = w[i * d + r] + drift * dt;
      if (!J.sig_dx.empty() || (inter && !J.sig_dpsi.empty())) {
        for (std::size_t c = 0; c < m; ++c) {
          double s = 0.0;
          if (!J.sig_dx.empty())
            for (std::size_t e = 0; e < d; ++e) s += J.sig_dx[((i * d + r) * m + c) * d + e] * w[i * d + e];
          if (inter && !J.sig_dpsi.empty())
            for (std::size_t q = 0; q < p; ++q) s += J.sig_dpsi[((i * d + r) * m + c) * p + q] * S[q];
          diff[c] = s;
        }
        for (std::size_t c = 0; c < m; ++c) v += diff[c] * dw[c];
      }
      check_finite(v, i, node_after, what);
      out[i * d + r] = v;
    }
  }
}

/// d_Psi b(x^i) L for every particle: the limit expectation term.
inline std::vector<double> expectation_term(const JetBlock& J, std::span<const double> L) {
  const std::size_t d = J.D(), p = J.P();
  std::vector<double> out(J.n * d, 0.0);
  for (std::size_t i = 0; i < J.n; ++i)
    for (std::size_t r = 0; r < d; ++r) {
      double s = 0.0;
      for (std::size_t q = 0; q < p; ++q) s += J.dpsi[(i * d + r) * p + q] * L[q];
      out[i * d + r] = s;
    }
  return out;
}

/// sigma*a^-1(x^i) y^i, an m-vector per particle.
inline std::vector<double> apply_ssai(const JetBlock& J, std::span<const double> y) {
  const std::size_t d = J.D(), m = J.Mn();
  std::vector<double> out(J.n * m, 0.0);
  for (std::size_t i = 0; i < J.n; ++i)
    for (std::size_t c = 0; c < m; ++c) {
      double s = 0.0;
      for (std::size_t e = 0; e < d; ++e) s += J.ssai[(i * m + c) * d + e] * y[i * d + e];
      out[i * m + c] = s;
    }
  return out;
}

/// sigma(x^i) h^i, a d-vector per particle.
inline std::vector<double> apply_sigma(const JetBlock& J, std::span<const double> h) {
  const std::size_t d = J.D(), m = J.Mn();
  std::vector<double> out(J.n * d, 0.0);
  for (std::size_t i = 0; i < J.n; ++i)
    for (std::size_t r = 0; r < d; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < m; ++c) s += J.sig[(i * d + r) * m + c] * h[i * m + c];
      out[i * d + r] = s;
    }
  return out;
}

template <MeanFieldModel M>
void require_h2(const M& model) {
  if (!model.dist_free_diffusion())
    throw UnsupportedModelError("model '" + model.id() +
                                "' has measure-dependent diffusion or no sigma* a^-1; Malliavin flows are unavailable");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Auxiliary ensemble

/// Integrates an M-particle system with its directional flows on an
/// independent bank and records the per-node pairing L_n.
/// When `law_out` is given, the same ensemble's feature means (and positions
/// if `store_positions`) are written there as a frozen law.
template <MeanFieldModel M>
AuxiliaryFlowLaw run_auxiliary(const M& model, std::size_t M_count, const NoiseBank& bank_aux, const TimeGrid& grid,
                               const InitialLaw& init, const DirectionSpec& phi, std::uint64_t init_seed,
                               FrozenLaw* law_out = nullptr, bool store_positions = true) {
  detail::check_bank(bank_aux, grid, M_count, model.noise_dim());
  if (law_out != nullptr) {
    *law_out = FrozenLaw{};
    law_out->d = model.dim();
    law_out->p = model.feature_dim();
    law_out->M = M_count;
    law_out->grid = grid;
  }
  AuxiliaryFlowLaw aux;
  aux.d = model.dim();
  aux.p = model.feature_dim();
  aux.M = M_count;
  aux.grid = grid;
  const auto d = static_cast<std::size_t>(aux.d);
  auto x = sample_initial(init, init_seed, M_count, aux.d);
  auto v = initial_directions(phi, x, aux.d);
  std::vector<double> xn(x.size()), vn(v.size());
  detail::JetBlock J;
  for (int n = 0;; ++n) {
    const auto psi = feature_mean(model, x, M_count);
    if (law_out != nullptr) {
      law_out->features.insert(law_out->features.end(), psi.begin(), psi.end());
      if (store_positions) law_out->positions.insert(law_out->positions.end(), x.begin(), x.end());
    }
    detail::fill_jets(model, grid.t(n), x, M_count, psi, true, false, J);
    const auto S = detail::pairing_mean(J, v);
    aux.pairing.insert(aux.pairing.end(), S.begin(), S.end());
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < M_count; ++i) s += v[i * d + c];
      aux.mean_v.push_back(s / static_cast<double>(M_count));
    }
    if (n == grid.n_steps) break;
    detail::flow_step(J, v, S, {}, 0.0, {}, grid.dt(), bank_aux, n, vn, "auxiliary flow", n + 1);
    detail::euler_positions_from(J, x, grid.dt(), bank_aux, n, xn, "auxiliary particle", n + 1);
    std::swap(x, xn);
    std::swap(v, vn);
  }
  return aux;
}

/// Exact pairing for mf_ou and an affine field: E v_t = e^{(a+b)t} E phi(X_0).
inline AuxiliaryFlowLaw ou_auxiliary_law(const MfOu& ou, const InitialLaw& init, const DirectionSpec& phi,
                                         const TimeGrid& grid) {
  AuxiliaryFlowLaw aux;
  aux.d = ou.d;
  aux.p = ou.d;
  aux.M = 0;
  aux.grid = grid;
  const double e0 = phi.mean_under(init);
  for (int n = 0; n < grid.nodes(); ++n) {
    const double ev = e0 * std::exp((ou.a + ou.b) * grid.t(n));
    for (int c = 0; c < ou.d; ++c) {
      aux.pairing.push_back(ev);
      aux.mean_v.push_back(ev);
    }
  }
  return aux;
}

// ---------------------------------------------------------------------------
// Single-step operations

/// One step of the particle directional flows; the interaction uses the
/// pre-step flows of all particles.
template <MeanFieldModel M>
std::vector<double> step_directional_particle(const M& model, const ParticleCloud& particles,
                                              std::span<const double> v, const NoiseBank& bank, const TimeGrid& grid) {
  const std::size_t n = particles.size();
  if (v.size() != particles.x.size()) throw DimensionError("step_directional_particle: flow size differs from cloud");
  detail::check_bank(bank, grid, n, model.noise_dim());
  detail::JetBlock J;
  detail::fill_jets(model, grid.t(particles.node), particles.x, n, feature_mean(model, particles.x, n), true, false, J);
  const auto S = detail::pairing_mean(J, v);
  std::vector<double> out(v.size());
  detail::flow_step(J, v, S, {}, 0.0, {}, grid.dt(), bank, particles.node, out, "directional flow",
                    particles.node + 1);
  return out;
}

/// One step of the limit directional flows; the expectation term comes from
/// the auxiliary ensemble at the current node.
template <MeanFieldModel M>
std::vector<double> step_directional_limit(const M& model, const LimitCloud& limits, std::span<const double> u,
                                           const AuxiliaryFlowLaw* aux, const NoiseBank& bank, const TimeGrid& grid) {
  if (aux == nullptr) throw ConfigError("step_directional_limit: no auxiliary ensemble configured");
  if (!limits.law) throw ConfigError("step_directional_limit: no frozen law attached");
  const int node = limits.copies.node;
  const std::size_t n = limits.copies.size();
  if (u.size() != limits.copies.x.size()) throw DimensionError("step_directional_limit: flow size differs from cloud");
  if (aux->grid.n_steps != grid.n_steps) throw DimensionError("step_directional_limit: auxiliary grid differs");
  detail::check_bank(bank, grid, n, model.noise_dim());
  detail::JetBlock J;
  detail::fill_jets(model, grid.t(node), limits.copies.x, n, limits.law->features_at(node), false, false, J);
  std::vector<double> out(u.size());
  detail::flow_step(J, u, aux->pairing_at(node), {}, 0.0, {}, grid.dt(), bank, node, out, "limit directional flow",
                    node + 1);
  return out;
}

/// h'_t = 1{t >= r} sigma* a^-1(x) g'_t v_t for every particle at `node`
/// (an m-vector each).
template <MeanFieldModel M>
std::vector<double> build_malliavin_direction(const M& model, const WeightFunction& weight, int node,
                                              std::span<const double> xs, std::span<const double> v) {
  detail::require_h2(model);
  const auto d = static_cast<std::size_t>(model.dim()), m = static_cast<std::size_t>(model.noise_dim());
  const std::size_t n = xs.size() / d;
  std::vector<double> out(n * m, 0.0);
  if (!weight.active(node)) return out;
  const double gp = weight.dg[static_cast<std::size_t>(node)];
  std::vector<double> a(m * d);
  const double t = weight.grid.t(node);
  for (std::size_t i = 0; i < n; ++i) {
    model.sigma_star_a_inv(t, xs.subspan(i * d, d), a);
    for (std::size_t c = 0; c < m; ++c) {
      double s = 0.0;
      for (std::size_t e = 0; e < d; ++e) s += a[c * d + e] * v[i * d + e];
      out[i * m + c] = gp * s;
    }
  }
  return out;
}

using MalliavinSource = detail::Source;

inline MalliavinSource source_all() { return {MalliavinSource::Kind::kAll, 0}; }
inline MalliavinSource source_only(std::size_t l) { return {MalliavinSource::Kind::kOnly, l}; }
inline MalliavinSource source_all_but(std::size_t l) { return {MalliavinSource::Kind::kAllBut, l}; }

/// One step of the particle Malliavin flow w^{., (l)} (source g'v at the
/// selected particles). source_all() gives the full derivative, source_only(l)
/// component l, and source_all_but(l) the superposed cross components.
template <MeanFieldModel M>
std::vector<double> step_malliavin_component(const M& model, const ParticleCloud& particles, std::span<const double> v,
                                             std::span<const double> w, MalliavinSource src,
                                             const WeightFunction& weight, const NoiseBank& bank,
                                             const TimeGrid& grid) {
  detail::require_h2(model);
  const std::size_t n = particles.size();
  const int node = particles.node;
  detail::check_bank(bank, grid, n, model.noise_dim());
  if (!weight.active(node)) return std::vector<double>(w.begin(), w.end());
  detail::JetBlock J;
  detail::fill_jets(model, grid.t(node), particles.x, n, feature_mean(model, particles.x, n), true, false, J);
  const auto S = detail::pairing_mean(J, w);
  std::vector<double> out(w.size());
  detail::flow_step(J, w, S, v, weight.dg[static_cast<std::size_t>(node)], src, grid.dt(), bank, node, out,
                    "Malliavin flow", node + 1);
  return out;
}

/// One step of the limit Malliavin flow with source g'u and no interaction.
template <MeanFieldModel M>
std::vector<double> step_malliavin_limit(const M& model, const LimitCloud& limits, std::span<const double> u,
                                         std::span<const double> w, const WeightFunction& weight,
                                         const NoiseBank& bank, const TimeGrid& grid) {
  detail::require_h2(model);
  if (!limits.law) throw ConfigError("step_malliavin_limit: no frozen law attached");
  const int node = limits.copies.node;
  const std::size_t n = limits.copies.size();
  detail::check_bank(bank, grid, n, model.noise_dim());
  if (!weight.active(node)) return std::vector<double>(w.begin(), w.end());
  detail::JetBlock J;
  detail::fill_jets(model, grid.t(node), limits.copies.x, n, limits.law->features_at(node), false, false, J);
  std::vector<double> out(w.size());
  detail::flow_step(J, w, {}, u, weight.dg[static_cast<std::size_t>(node)], source_all(), grid.dt(), bank, node, out,
                    "limit Malliavin flow", node + 1);
  return out;
}

/// h-hat source sigma sigma* a^-1 [g d_Psi b L] at every copy for one node.
inline std::vector<double> hhat_source(const detail::JetBlock& J, const WeightFunction& weight, int node,
                                       std::span<const double> L) {
  if (!weight.active(node)) return std::vector<double>(J.n * J.D(), 0.0);
  auto e = detail::expectation_term(J, L);
  const double g = weight.g[static_cast<std::size_t>(node)];
  for (auto& x : e) x *= g;
  return detail::apply_sigma(J, detail::apply_ssai(J, e));
}

/// One step of the flow driven by the h-hat direction.
template <MeanFieldModel M>
std::vector<double> step_hhat_limit(const M& model, const LimitCloud& limits, std::span<const double> z,
                                    const AuxiliaryFlowLaw* aux, const WeightFunction& weight, const NoiseBank& bank,
                                    const TimeGrid& grid) {
  detail::require_h2(model);
  if (aux == nullptr) throw ConfigError("step_hhat_limit: no auxiliary ensemble configured");
  if (!limits.law) throw ConfigError("step_hhat_limit: no frozen law attached");
  const int node = limits.copies.node;
  const std::size_t n = limits.copies.size();
  detail::check_bank(bank, grid, n, model.noise_dim());
  if (!weight.active(node)) return std::vector<double>(z.begin(), z.end());
  detail::JetBlock J;
  detail::fill_jets(model, grid.t(node), limits.copies.x, n, limits.law->features_at(node), false, true, J);
  const auto src = hhat_source(J, weight, node, aux->pairing_at(node));
  std::vector<double> out(z.size());
  detail::flow_step(J, z, {}, src, 1.0, source_all(), grid.dt(), bank, node, out, "h-hat flow", node + 1);
  return out;
}

// ---------------------------------------------------------------------------
// Coupled replication driver

struct CoupledOptions {
  bool limit = true;        // limit copies and everything attached to them
  bool directional = true;  // v and u
  bool malliavin = true;    // own/cross particle components, limit w and h-hat flow
  bool bismut = true;       // stochastic integrals of h' and zeta
  std::size_t tagged = 1;   // particles 0..tagged-1 get own/cross systems
  MetricsConfig metrics;
  int zeta_node = -1;       // node of the zeta diagnostic, -1 for none
  double zeta_k = 2.0;
};

struct CoupledInputs {
  std::shared_ptr<const FrozenLaw> law;
  const AuxiliaryFlowLaw* aux = nullptr;
  const WeightFunction* weight = nullptr;
  DirectionSpec phi = DirectionSpec::constant(1.0);
  std::vector<double> x0;  // N x d, shared by particles and limit copies
};

/// Everything one replication produces. Sup quantities are running maxima of
/// Euclidean norms over all nodes.
struct CoupledResult {
  std::size_t N = 0;
  int d = 1;
  PathStats paths;
  std::vector<double> dir_sup;   // per particle, |v^{i,N} - u^i|
  std::vector<double> mall_sup;  // per tagged particle, |w^{own} - w^{h}|
  std::vector<double> hhat_sup;  // per tagged particle, |w^{cross} - w^{hhat}|
  std::vector<double> cross_sup; // per tagged particle, |w^{cross}|
  double ld_particle = 0.0;      // max over nodes and particles of |w^{full} - g v|
  double ld_limit = 0.0;         // max |w^h + w^hhat - g u|
  double ld_limit_h_only = 0.0;  // max |w^h - g u|
  std::vector<double> x_T, y_T, v_T, u_T;
  std::vector<double> own_T, cross_T, wlim_T, hhat_T;  // tagged x d
  std::vector<double> bismut_particle;  // per particle, sum_n <h'_n, dW_n>
  std::vector<double> bismut_limit;     // per copy, sum_n <zeta_n, dW_n>
  double zeta_moment = 0.0;             // mean over copies of |zeta_t^{i,N}|^k at zeta_node
};

namespace detail {
inline double norm_at(std::span<const double> a, std::size_t i, std::size_t d) {
  double s = 0.0;
  for (std::size_t c = 0; c < d; ++c) s += a[i * d + c] * a[i * d + c];
  return std::sqrt(s);
}
inline double gap_at(std::span<const double> a, std::size_t ia, std::span<const double> b, std::size_t ib,
                     std::size_t d) {
  double s = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double t = a[ia * d + c] - b[ib * d + c];
    s += t * t;
  }
  return std::sqrt(s);
}
}  // namespace detail

/// Runs one synchronously coupled replication over the whole grid: particles,
/// limit copies, directional flows, Malliavin flows and Bismut integrals.
template <MeanFieldModel M>
CoupledResult run_coupled(const M& model, const TimeGrid& grid, const NoiseBank& bank, std::size_t N,
                          const CoupledInputs& in, const CoupledOptions& opt) {
  const int di = model.dim();
  const auto d = static_cast<std::size_t>(di);
  const auto m = static_cast<std::size_t>(model.noise_dim());
  if (in.x0.size() != N * d) throw DimensionError("run_coupled: initial positions have the wrong size");
  detail::check_bank(bank, grid, N, model.noise_dim());
  const bool lim = opt.limit;
  const bool dir = opt.directional || opt.malliavin || opt.bismut;
  const bool mall = opt.malliavin;
  const bool bis = opt.bismut;
  if (lim && !in.law) throw ConfigError("run_coupled: limit copies need a frozen law");
  if (lim && in.law->grid.n_steps != grid.n_steps) throw DimensionError("run_coupled: frozen law grid differs");
  if (lim && dir && in.aux == nullptr) throw ConfigError("run_coupled: limit flows need an auxiliary ensemble");
  if ((mall || bis) && in.weight == nullptr) throw ConfigError("run_coupled: Malliavin flows need a weight function");
  if (mall || bis) detail::require_h2(model);
  const std::size_t K = mall ? std::min(opt.tagged, N) : 0;

  CoupledResult res;
  res.N = N;
  res.d = di;
  std::vector<double> X = in.x0, Y = in.x0;
  std::vector<double> v, u;
  if (dir) {
    v = initial_directions(in.phi, X, di);
    if (lim) u = v;
  }
  const std::vector<double> zero(N * d, 0.0);
  std::vector<std::vector<double>> own(K, zero), cross(K, zero);
  std::vector<double> wlim, zh;
  if (mall && lim) {
    wlim = zero;
    zh = zero;
  }
  if (dir && lim) res.dir_sup.assign(N, 0.0);
  res.mall_sup.assign(K, 0.0);
  res.hhat_sup.assign(K, 0.0);
  res.cross_sup.assign(K, 0.0);
  if (bis) {
    res.bismut_particle.assign(N, 0.0);
    if (lim) res.bismut_limit.assign(N, 0.0);
  }

  std::vector<double> Xn(X.size()), Yn(X.size()), vn, un, wn(X.size());
  if (dir) {
    vn.resize(X.size());
    un.resize(X.size());
  }
  detail::JetBlock JX, JY;
  const double dt = grid.dt();

  auto observe = [&](int n) {
    if (lim) {
      ParticleCloud pc{di, n, X};
      LimitCloud lc{ParticleCloud{di, n, Y}, in.law};
      collect_path_stats(pc, lc, opt.metrics, res.paths);
      if (dir)
        for (std::size_t i = 0; i < N; ++i) res.dir_sup[i] = std::max(res.dir_sup[i], detail::gap_at(v, i, u, i, d));
    }
    if (mall) {
      const double g = in.weight->g[static_cast<std::size_t>(n)];
      for (std::size_t i = 0; i < N && K > 0; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double t = own[0][i * d + c] + cross[0][i * d + c] - g * v[i * d + c];
          s += t * t;
        }
        res.ld_particle = std::max(res.ld_particle, std::sqrt(s));
      }
      for (std::size_t k = 0; k < K; ++k) {
        res.cross_sup[k] = std::max(res.cross_sup[k], detail::norm_at(cross[k], k, d));
        if (lim) {
          res.mall_sup[k] = std::max(res.mall_sup[k], detail::gap_at(own[k], k, wlim, k, d));
          res.hhat_sup[k] = std::max(res.hhat_sup[k], detail::gap_at(cross[k], k, zh, k, d));
        }
      }
      if (lim)
        for (std::size_t i = 0; i < N; ++i) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double a = wlim[i * d + c] + zh[i * d + c] - g * u[i * d + c];
            const double b = wlim[i * d + c] - g * u[i * d + c];
            s1 += a * a;
            s2 += b * b;
          }
          res.ld_limit = std::max(res.ld_limit, std::sqrt(s1));
          res.ld_limit_h_only = std::max(res.ld_limit_h_only, std::sqrt(s2));
        }
    }
  };

  for (int n = 0;; ++n) {
    observe(n);
    const double t = grid.t(n);
    const auto psiN = feature_mean(model, X, N);
    const bool need_grad = dir || mall || (n == opt.zeta_node);
    detail::fill_jets(model, t, X, N, psiN, need_grad, bis, JX);
    if (lim) detail::fill_jets(model, t, Y, N, in.law->features_at(n), n == opt.zeta_node, bis || mall, JY);

    if (lim && dir && n == opt.zeta_node) {
      // zeta^{i,N} = d_Psi b(Y^i) [ (1/N) sum_j grad psi(Y^j) u^j - L_n ]
      const auto S = detail::pairing_mean(JY, u);
      const auto L = in.aux->pairing_at(n);
      std::vector<double> diff(S.size());
      for (std::size_t q = 0; q < S.size(); ++q) diff[q] = S[q] - L[q];
      const auto z = detail::expectation_term(JY, diff);
      double acc = 0.0;
      for (std::size_t i = 0; i < N; ++i) acc += std::pow(detail::norm_at(z, i, d), opt.zeta_k);
      res.zeta_moment = acc / static_cast<double>(N);
    }
    if (n == grid.n_steps) break;

    const bool active = (mall || bis) && in.weight->active(n);
    const double gp = active ? in.weight->dg[static_cast<std::size_t>(n)] : 0.0;
    const double g = active ? in.weight->g[static_cast<std::size_t>(n)] : 0.0;

    std::vector<double> lim_term;
    if (lim && dir) lim_term = detail::expectation_term(JY, in.aux->pairing_at(n));

    if (bis && active) {
      std::vector<double> src(N * d);
      for (std::size_t e = 0; e < N * d; ++e) src[e] = gp * v[e];
      const auto h = detail::apply_ssai(JX, src);
      for (std::size_t i = 0; i < N; ++i) {
        const auto dw = bank.increment(i, n);
        for (std::size_t c = 0; c < m; ++c) res.bismut_particle[i] += h[i * m + c] * dw[c];
      }
      if (lim) {
        for (std::size_t e = 0; e < N * d; ++e) src[e] = gp * u[e] + g * lim_term[e];
        const auto zeta = detail::apply_ssai(JY, src);
        for (std::size_t i = 0; i < N; ++i) {
          const auto dw = bank.increment(i, n);
          for (std::size_t c = 0; c < m; ++c) res.bismut_limit[i] += zeta[i * m + c] * dw[c];
        }
      }
    }

    if (mall && active) {
      for (std::size_t k = 0; k < K; ++k) {
        const auto So = detail::pairing_mean(JX, own[k]);
        detail::flow_step(JX, own[k], So, v, gp, source_only(k), dt, bank, n, wn, "Malliavin own component", n + 1);
        std::swap(own[k], wn);
        const auto Sc = detail::pairing_mean(JX, cross[k]);
        detail::flow_step(JX, cross[k], Sc, v, gp, source_all_but(k), dt, bank, n, wn, "Malliavin cross components",
                          n + 1);
        std::swap(cross[k], wn);
      }
      if (lim) {
        detail::flow_step(JY, wlim, {}, u, gp, source_all(), dt, bank, n, wn, "limit Malliavin flow", n + 1);
        std::swap(wlim, wn);
        std::vector<double> e(lim_term);
        for (auto& x : e) x *= g;
        const auto src = detail::apply_sigma(JY, detail::apply_ssai(JY, e));
        detail::flow_step(JY, zh, {}, src, 1.0, source_all(), dt, bank, n, wn, "h-hat flow", n + 1);
        std::swap(zh, wn);
      }
    }

    if (dir) {
      const auto S = detail::pairing_mean(JX, v);
      detail::flow_step(JX, v, S, {}, 0.0, {}, dt, bank, n, vn, "directional flow", n + 1);
      if (lim)
        detail::flow_step(JY, u, in.aux->pairing_at(n), {}, 0.0, {}, dt, bank, n, un, "limit directional flow",
                          n + 1);
    }
    detail::euler_positions_from(JX, X, dt, bank, n, Xn, "particle", n + 1);
    if (lim) detail::euler_positions_from(JY, Y, dt, bank, n, Yn, "limit copy", n + 1);

    std::swap(X, Xn);
    if (lim) std::swap(Y, Yn);
    if (dir) {
      std::swap(v, vn);
      if (lim) std::swap(u, un);
    }
  }

  res.x_T = X;
  if (lim) res.y_T = Y;
  res.v_T = v;
  if (lim) res.u_T = u;
  for (std::size_t k = 0; k < K; ++k) {
    res.own_T.insert(res.own_T.end(), own[k].begin() + static_cast<std::ptrdiff_t>(k * d),
                     own[k].begin() + static_cast<std::ptrdiff_t>((k + 1) * d));
    res.cross_T.insert(res.cross_T.end(), cross[k].begin() + static_cast<std::ptrdiff_t>(k * d),
                       cross[k].begin() + static_cast<std::ptrdiff_t>((k + 1) * d));
    if (lim) {
      res.wlim_T.insert(res.wlim_T.end(), wlim.begin() + static_cast<std::ptrdiff_t>(k * d),
                        wlim.begin() + static_cast<std::ptrdiff_t>((k + 1) * d));
      res.hhat_T.insert(res.hhat_T.end(), zh.begin() + static_cast<std::ptrdiff_t>(k * d),
                        zh.begin() + static_cast<std::ptrdiff_t>((k + 1) * d));
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Seeds and limit-law setup

/// Sub-seed tags. Replication r draws its bank from
/// derive_seed(seed, kReplicationBank + r) and its initial positions from
/// derive_seed(seed, kReplicationInit + r), so every estimator run with the
/// same seed sees the same noise.
namespace seed_tags {
inline constexpr std::uint64_t kReferenceBank = 1;
inline constexpr std::uint64_t kReferenceInit = 2;
inline constexpr std::uint64_t kAuxiliaryBank = 3;
inline constexpr std::uint64_t kAuxiliaryInit = 4;
inline constexpr std::uint64_t kSubsample = 5;
inline constexpr std::uint64_t kPilotBank = 6;
inline constexpr std::uint64_t kPilotInit = 7;
inline constexpr std::uint64_t kReplicationBank = 1ULL << 32;
inline constexpr std::uint64_t kReplicationInit = 2ULL << 32;
}  // namespace seed_tags

inline std::uint64_t replication_bank_seed(std::uint64_t seed, std::size_t r) {
  return derive_seed(seed, seed_tags::kReplicationBank + r);
}
inline std::uint64_t replication_init_seed(std::uint64_t seed, std::size_t r) {
  return derive_seed(seed, seed_tags::kReplicationInit + r);
}

struct LimitSetupOptions {
  std::size_t M_ref = 16384;
  std::size_t M_aux = 16384;
  std::size_t min_ref = 1;
  std::uint64_t seed = 0;
  bool prefer_analytic = true;
  bool store_positions = true;
  bool need_aux = true;
  int threads = 1;
};

/// Frozen law and auxiliary pairing shared by every replication.
struct LimitSetup {
  std::shared_ptr<const FrozenLaw> law;
  std::shared_ptr<const AuxiliaryFlowLaw> aux;
  bool analytic_law = false;
  bool analytic_aux = false;
};

template <MeanFieldModel M>
LimitSetup build_limit_setup(const M& model, const TimeGrid& grid, const InitialLaw& init, const DirectionSpec& phi,
                             const LimitSetupOptions& opt) {
  LimitSetup out;
  if constexpr (std::is_same_v<M, MfOu>) {
    if (opt.prefer_analytic) {
      out.law = std::make_shared<const FrozenLaw>(ou_limit_law(model, init, grid, opt.M_ref,
                                                               derive_seed(opt.seed, seed_tags::kReferenceInit),
                                                               opt.store_positions));
      out.analytic_law = true;
      if (opt.need_aux && phi.affine() && init.kind != InitialLaw::Kind::kStudentT) {
        out.aux = std::make_shared<const AuxiliaryFlowLaw>(ou_auxiliary_law(model, init, phi, grid));
        out.analytic_aux = true;
      }
    }
  }
  if (opt.M_ref < opt.min_ref)
    throw ParameterError("reference size M_ref = " + std::to_string(opt.M_ref) + " is below the floor " +
                         std::to_string(opt.min_ref));
  if (!out.law && opt.need_aux && opt.M_aux == opt.M_ref) {
    // One ensemble supplies both the frozen law and the pairing, so the two
    // limit ingredients describe the same joint law.
    const auto bank = make_noise_bank(derive_seed(opt.seed, seed_tags::kReferenceBank), opt.M_ref, grid,
                                      model.noise_dim(), opt.threads);
    auto law = std::make_shared<FrozenLaw>();
    out.aux = std::make_shared<const AuxiliaryFlowLaw>(run_auxiliary(model, opt.M_ref, bank, grid, init, phi,
                                                                     derive_seed(opt.seed, seed_tags::kReferenceInit),
                                                                     law.get(), opt.store_positions));
    out.law = std::move(law);
  }
  if (!out.law) {
    const auto bank = make_noise_bank(derive_seed(opt.seed, seed_tags::kReferenceBank), opt.M_ref, grid,
                                      model.noise_dim(), opt.threads);
    ReferenceOptions ro;
    ro.min_size = opt.min_ref;
    ro.store_positions = opt.store_positions;
    ro.init_seed = derive_seed(opt.seed, seed_tags::kReferenceInit);
    out.law = std::make_shared<const FrozenLaw>(run_reference(model, opt.M_ref, bank, grid, init, ro));
  }
  if (opt.need_aux && !out.aux) {
    const auto bank = make_noise_bank(derive_seed(opt.seed, seed_tags::kAuxiliaryBank), opt.M_aux, grid,
                                      model.noise_dim(), opt.threads);
    out.aux = std::make_shared<const AuxiliaryFlowLaw>(
        run_auxiliary(model, opt.M_aux, bank, grid, init, phi, derive_seed(opt.seed, seed_tags::kAuxiliaryInit)));
  }
  return out;
}

}  // namespace mfchaos
