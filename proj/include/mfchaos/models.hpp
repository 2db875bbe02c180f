#pragma once

// Coefficient bundles for mean-field SDEs with convolution-type measure
// dependence. A model sees a measure mu only through its feature mean
//
//     Psi(mu) = integral psi(y) mu(dy)   in R^p,
//
// so b_t(x, mu) = B(t, x, Psi(mu)) and the Lions derivative factorises as
//
//     D^L b_t(x, mu)(y) = d_Psi B(t, x, Psi) . grad psi(y).
//
// The same holds for sigma. Interaction sums over N particles therefore cost
// O(N) rather than O(N^2).

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mfchaos/errors.hpp"
#include "mfchaos/measures.hpp"

namespace mfchaos {

/// Regularity metadata for the rate theory. q = +inf means all moments of
/// the initial law are finite.
struct Admissibility {
  double k = 2.0;
  double q = std::numeric_limits<double>::infinity();
  double holder_alpha = 1.0;
  double growth_m = 0.0;
  double lipschitz_K = 0.0;
  bool globally_lipschitz = true;  // false: only the one-sided condition holds
  std::string note;

  void validate() const {
    if (!(k >= 2.0)) throw ParameterError("Admissibility: k must be >= 2");
    if (!(q > k)) throw ParameterError("Admissibility: q must exceed k");
    if (!(holder_alpha > 0.0 && holder_alpha <= 1.0)) throw ParameterError("Admissibility: alpha must lie in (0, 1]");
    if (!(growth_m >= 0.0)) throw ParameterError("Admissibility: m must be >= 0");
    if (std::isfinite(q) && growth_m > q * (k - holder_alpha))
      throw ParameterError("Admissibility: m must not exceed q (k - alpha)");
  }
};

/// All coefficient values a flow step needs at one (t, x, Psi). Matrices are
/// row-major. Tensors: diffusion_dx[(i*m + j)*d + c] = d sigma_ij / d x_c and
/// diffusion_dpsi[(i*m + j)*p + c] = d sigma_ij / d Psi_c.
struct Jet {
  std::vector<double> drift;           // d
  std::vector<double> drift_dx;        // d x d
  std::vector<double> drift_dpsi;      // d x p
  std::vector<double> diffusion;       // d x m
  std::vector<double> diffusion_dx;    // d x m x d (empty when sigma is constant in x)
  std::vector<double> diffusion_dpsi;  // d x m x p (empty when sigma ignores the measure)

  void resize(int d, int m, int p) {
    drift.assign(static_cast<std::size_t>(d), 0.0);
    drift_dx.assign(static_cast<std::size_t>(d * d), 0.0);
    drift_dpsi.assign(static_cast<std::size_t>(d * p), 0.0);
    diffusion.assign(static_cast<std::size_t>(d * m), 0.0);
  }
};

/// Compile-time interface consumed by the simulation templates.
template <class M>
concept MeanFieldModel = requires(const M& model, double t, std::span<const double> x, std::span<double> out,
                                  Jet& jet) {
  { model.dim() } -> std::convertible_to<int>;
  { model.noise_dim() } -> std::convertible_to<int>;
  { model.feature_dim() } -> std::convertible_to<int>;
  // psi(y) into out[0..p) and grad psi(y) (p x d) into out[p..p + p d).
  model.features(x, out);
  model.jet(t, x, x, jet);
  { model.dist_free_diffusion() } -> std::convertible_to<bool>;
  model.sigma_star_a_inv(t, x, out);
  { model.admissibility() } -> std::convertible_to<Admissibility>;
  { model.id() } -> std::convertible_to<std::string>;
};

// ---------------------------------------------------------------------------
// Built-in models

/// Linear mean-field Ornstein-Uhlenbeck: b(x, mu) = a x + b mean(mu), sigma = s I.
struct MfOu {
  double a = -1.0;
  double b = 0.5;
  double sigma = 0.3;
  int d = 1;

  int dim() const { return d; }
  int noise_dim() const { return d; }
  int feature_dim() const { return d; }
  std::string id() const { return "mf_ou"; }

  void features(std::span<const double> y, std::span<double> out) const {
    const auto dd = static_cast<std::size_t>(d);
    for (std::size_t c = 0; c < dd; ++c) out[c] = y[c];
    for (std::size_t r = 0; r < dd; ++r)
      for (std::size_t c = 0; c < dd; ++c) out[dd + r * dd + c] = r == c ? 1.0 : 0.0;
  }

  void jet(double, std::span<const double> x, std::span<const double> psi, Jet& j) const {
    const auto dd = static_cast<std::size_t>(d);
    for (std::size_t r = 0; r < dd; ++r) {
      j.drift[r] = a * x[r] + b * psi[r];
      for (std::size_t c = 0; c < dd; ++c) {
        j.drift_dx[r * dd + c] = r == c ? a : 0.0;
        j.drift_dpsi[r * dd + c] = r == c ? b : 0.0;
        j.diffusion[r * dd + c] = r == c ? sigma : 0.0;
      }
    }
  }

  bool dist_free_diffusion() const { return true; }
  void sigma_star_a_inv(double, std::span<const double>, std::span<double> out) const {
    const auto dd = static_cast<std::size_t>(d);
    for (std::size_t r = 0; r < dd; ++r)
      for (std::size_t c = 0; c < dd; ++c) out[r * dd + c] = r == c ? 1.0 / sigma : 0.0;
  }

  Admissibility admissibility() const {
    Admissibility adm;
    adm.lipschitz_K = 2.0 * std::abs(a) + std::abs(b);
    return adm;
  }
};

/// Mean-field Kuramoto on the line: b(x, mu) = kappa int sin(y - x) mu(dy), sigma constant.
struct Kuramoto {
  double kappa = 1.0;
  double sigma = 0.5;

  int dim() const { return 1; }
  int noise_dim() const { return 1; }
  int feature_dim() const { return 2; }
  std::string id() const { return "kuramoto"; }

  // psi(y) = (sin y, cos y)
  void features(std::span<const double> y, std::span<double> out) const {
    const double s = std::sin(y[0]), c = std::cos(y[0]);
    out[0] = s;
    out[1] = c;
    out[2] = c;
    out[3] = -s;
  }

  // sin(y - x) = sin y cos x - cos y sin x, averaged: S cos x - C sin x.
  void jet(double, std::span<const double> x, std::span<const double> psi, Jet& j) const {
    const double s = std::sin(x[0]), c = std::cos(x[0]);
    j.drift[0] = kappa * (psi[0] * c - psi[1] * s);
    j.drift_dx[0] = -kappa * (psi[0] * s + psi[1] * c);
    j.drift_dpsi[0] = kappa * c;
    j.drift_dpsi[1] = -kappa * s;
    j.diffusion[0] = sigma;
  }

  bool dist_free_diffusion() const { return true; }
  void sigma_star_a_inv(double, std::span<const double>, std::span<double> out) const { out[0] = 1.0 / sigma; }

  Admissibility admissibility() const {
    Admissibility adm;
    adm.lipschitz_K = 3.0 * std::abs(kappa);
    return adm;
  }
};

/// Double well with mean attraction: b(x, mu) = -theta x^3 + x + kappa (mean(mu) - x).
/// One-sided Lipschitz only; kept for exploratory runs.
struct DoubleWell {
  double theta = 1.0;
  double kappa = 1.0;
  double sigma = 0.5;

  int dim() const { return 1; }
  int noise_dim() const { return 1; }
  int feature_dim() const { return 1; }
  std::string id() const { return "double_well"; }

  void features(std::span<const double> y, std::span<double> out) const {
    out[0] = y[0];
    out[1] = 1.0;
  }

  void jet(double, std::span<const double> x, std::span<const double> psi, Jet& j) const {
    const double v = x[0];
    j.drift[0] = -theta * v * v * v + v + kappa * (psi[0] - v);
    j.drift_dx[0] = -3.0 * theta * v * v + 1.0 - kappa;
    j.drift_dpsi[0] = kappa;
    j.diffusion[0] = sigma;
  }

  bool dist_free_diffusion() const { return true; }
  void sigma_star_a_inv(double, std::span<const double>, std::span<double> out) const { out[0] = 1.0 / sigma; }

  Admissibility admissibility() const {
    Admissibility adm;
    adm.globally_lipschitz = false;
    adm.lipschitz_K = 2.0 * (1.0 + std::abs(kappa)) + std::abs(kappa);
    adm.note = "cubic drift: one-sided Lipschitz only, excluded from rate acceptance";
    return adm;
  }
};

// ---------------------------------------------------------------------------
// Type-erased model

/// Runtime-polymorphic model. Built-ins are wrapped by value; user models
/// are supplied through ModelFunctions.
class ModelSpec {
 public:
  struct Concept {
    virtual ~Concept() = default;
    virtual int dim() const = 0;
    virtual int noise_dim() const = 0;
    virtual int feature_dim() const = 0;
    virtual std::string id() const = 0;
    virtual void features(std::span<const double>, std::span<double>) const = 0;
    virtual void jet(double, std::span<const double>, std::span<const double>, Jet&) const = 0;
    virtual bool dist_free_diffusion() const = 0;
    virtual void sigma_star_a_inv(double, std::span<const double>, std::span<double>) const = 0;
    virtual Admissibility admissibility() const = 0;
  };

  template <MeanFieldModel M>
  explicit ModelSpec(M model) : impl_(std::make_shared<Adapter<M>>(std::move(model))) {}
  explicit ModelSpec(std::shared_ptr<const Concept> impl) : impl_(std::move(impl)) {}

  int dim() const { return impl_->dim(); }
  int noise_dim() const { return impl_->noise_dim(); }
  int feature_dim() const { return impl_->feature_dim(); }
  std::string id() const { return impl_->id(); }
  void features(std::span<const double> y, std::span<double> out) const { impl_->features(y, out); }
  void jet(double t, std::span<const double> x, std::span<const double> psi, Jet& j) const { impl_->jet(t, x, psi, j); }
  bool dist_free_diffusion() const { return impl_->dist_free_diffusion(); }
  void sigma_star_a_inv(double t, std::span<const double> x, std::span<double> out) const {
    impl_->sigma_star_a_inv(t, x, out);
  }
  Admissibility admissibility() const { return impl_->admissibility(); }

 private:
  template <class M>
  struct Adapter final : Concept {
    explicit Adapter(M m) : model(std::move(m)) {}
    int dim() const override { return model.dim(); }
    int noise_dim() const override { return model.noise_dim(); }
    int feature_dim() const override { return model.feature_dim(); }
    std::string id() const override { return model.id(); }
    void features(std::span<const double> y, std::span<double> out) const override { model.features(y, out); }
    void jet(double t, std::span<const double> x, std::span<const double> psi, Jet& j) const override {
      model.jet(t, x, psi, j);
    }
    bool dist_free_diffusion() const override { return model.dist_free_diffusion(); }
    void sigma_star_a_inv(double t, std::span<const double> x, std::span<double> out) const override {
      model.sigma_star_a_inv(t, x, out);
    }
    Admissibility admissibility() const override { return model.admissibility(); }
    M model;
  };

  std::shared_ptr<const Concept> impl_;
};

/// User-supplied coefficients in feature form. sigma_star_a_inv must be left
/// empty when the diffusion depends on the measure.
struct ModelFunctions {
  std::string id = "custom";
  int d = 1;
  int m = 1;
  int p = 1;
  std::function<void(std::span<const double>, std::span<double>)> features;
  std::function<void(double, std::span<const double>, std::span<const double>, Jet&)> jet;
  std::function<void(double, std::span<const double>, std::span<double>)> sigma_star_a_inv;
  bool dist_free_diffusion = true;
  Admissibility admissibility;
};

inline ModelSpec make_model(ModelFunctions f) {
  if (f.d <= 0 || f.m <= 0 || f.p <= 0) throw DimensionError("make_model: d, m and p must be positive");
  if (!f.features || !f.jet) throw ParameterError("make_model: features and jet are required");
  if (!f.dist_free_diffusion && f.sigma_star_a_inv)
    throw ParameterError("make_model: sigma* a^-1 is only defined for distribution-free diffusion");
  struct Impl final : ModelSpec::Concept {
    explicit Impl(ModelFunctions fn) : f(std::move(fn)) {}
    int dim() const override { return f.d; }
    int noise_dim() const override { return f.m; }
    int feature_dim() const override { return f.p; }
    std::string id() const override { return f.id; }
    void features(std::span<const double> y, std::span<double> out) const override { f.features(y, out); }
    void jet(double t, std::span<const double> x, std::span<const double> psi, Jet& j) const override {
      f.jet(t, x, psi, j);
    }
    bool dist_free_diffusion() const override { return f.dist_free_diffusion && static_cast<bool>(f.sigma_star_a_inv); }
    void sigma_star_a_inv(double t, std::span<const double> x, std::span<double> out) const override {
      if (!f.sigma_star_a_inv) throw UnsupportedModelError("model '" + f.id + "' has no sigma* a^-1");
      f.sigma_star_a_inv(t, x, out);
    }
    Admissibility admissibility() const override { return f.admissibility; }
    ModelFunctions f;
  };
  return ModelSpec(std::make_shared<const Impl>(std::move(f)));
}

inline MfOu make_mf_ou_model(double a_coef, double b_coef, double sigma_coef, int d = 1) {
  if (!(sigma_coef > 0.0)) throw ParameterError("mf_ou: sigma must be positive");
  if (d <= 0) throw DimensionError("mf_ou: dimension must be positive");
  return MfOu{a_coef, b_coef, sigma_coef, d};
}
inline Kuramoto make_kuramoto_model(double kappa, double sigma) {
  if (!(sigma > 0.0)) throw ParameterError("kuramoto: noise sigma must be positive");
  return Kuramoto{kappa, sigma};
}
inline DoubleWell make_double_well_model(double theta, double kappa, double sigma) {
  if (!(theta > 0.0)) throw ParameterError("double_well: theta must be positive");
  if (!(sigma > 0.0)) throw ParameterError("double_well: sigma must be positive");
  return DoubleWell{theta, kappa, sigma};
}

inline ModelSpec make_mf_ou(double a_coef, double b_coef, double sigma_coef, int d = 1) {
  return ModelSpec(make_mf_ou_model(a_coef, b_coef, sigma_coef, d));
}
inline ModelSpec make_kuramoto(double kappa, double sigma) { return ModelSpec(make_kuramoto_model(kappa, sigma)); }
inline ModelSpec make_double_well(double theta, double kappa, double sigma) {
  return ModelSpec(make_double_well_model(theta, kappa, sigma));
}

// ---------------------------------------------------------------------------
// Measure-level evaluation

/// Mean of psi over `n` points of dimension d stored row-major in `xs`.
/// Blocked fixed-order summation: the result depends only on the inputs.
template <MeanFieldModel M>
std::vector<double> feature_mean(const M& model, std::span<const double> xs, std::size_t n) {
  const auto d = static_cast<std::size_t>(model.dim());
  const auto p = static_cast<std::size_t>(model.feature_dim());
  std::vector<double> buf(p + p * d), total(p, 0.0), block(p, 0.0);
  constexpr std::size_t kBlock = 256;
  for (std::size_t start = 0; start < n; start += kBlock) {
    std::fill(block.begin(), block.end(), 0.0);
    const std::size_t stop = std::min(n, start + kBlock);
    for (std::size_t j = start; j < stop; ++j) {
      model.features(xs.subspan(j * d, d), buf);
      for (std::size_t c = 0; c < p; ++c) block[c] += buf[c];
    }
    for (std::size_t c = 0; c < p; ++c) total[c] += block[c];
  }
  for (auto& v : total) v /= static_cast<double>(n);
  return total;
}

template <MeanFieldModel M>
std::vector<double> feature_mean(const M& model, const EmpiricalMeasure& mu) {
  if (mu.dim() != model.dim()) throw DimensionError("model dimension differs from measure dimension");
  return feature_mean(model, mu.flat(), mu.size());
}

template <MeanFieldModel M>
Jet evaluate_jet(const M& model, double t, std::span<const double> x, const EmpiricalMeasure& mu) {
  if (static_cast<int>(x.size()) != model.dim()) throw DimensionError("state dimension differs from model");
  const auto psi = feature_mean(model, mu);
  Jet j;
  j.resize(model.dim(), model.noise_dim(), model.feature_dim());
  model.jet(t, x, psi, j);
  return j;
}

/// b_t(x, mu).
template <MeanFieldModel M>
std::vector<double> drift(const M& model, double t, std::span<const double> x, const EmpiricalMeasure& mu) {
  return evaluate_jet(model, t, x, mu).drift;
}

/// sigma_t(x, mu), d x m row-major.
template <MeanFieldModel M>
std::vector<double> diffusion(const M& model, double t, std::span<const double> x, const EmpiricalMeasure& mu) {
  return evaluate_jet(model, t, x, mu).diffusion;
}

/// grad_x b_t(x, mu), d x d row-major.
template <MeanFieldModel M>
std::vector<double> drift_grad(const M& model, double t, std::span<const double> x, const EmpiricalMeasure& mu) {
  return evaluate_jet(model, t, x, mu).drift_dx;
}

/// grad_v sigma_t(x, mu), d x m.
template <MeanFieldModel M>
std::vector<double> diffusion_grad(const M& model, double t, std::span<const double> x, const EmpiricalMeasure& mu,
                                   std::span<const double> v) {
  const auto j = evaluate_jet(model, t, x, mu);
  const auto d = static_cast<std::size_t>(model.dim()), m = static_cast<std::size_t>(model.noise_dim());
  std::vector<double> out(d * m, 0.0);
  if (j.diffusion_dx.empty()) return out;
  for (std::size_t e = 0; e < d * m; ++e)
    for (std::size_t c = 0; c < d; ++c) out[e] += j.diffusion_dx[e * d + c] * v[c];
  return out;
}

/// D^L b_t(x, mu)(y), d x d row-major.
template <MeanFieldModel M>
std::vector<double> lions_drift(const M& model, double t, std::span<const double> x, const EmpiricalMeasure& mu,
                                std::span<const double> y) {
  const auto j = evaluate_jet(model, t, x, mu);
  const auto d = static_cast<std::size_t>(model.dim()), p = static_cast<std::size_t>(model.feature_dim());
  std::vector<double> buf(p + p * d);
  model.features(y, buf);
  std::vector<double> out(d * d, 0.0);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t q = 0; q < p; ++q) out[r * d + c] += j.drift_dpsi[r * p + q] * buf[p + q * d + c];
  return out;
}

/// <D^L sigma_t(x, mu)(y), v>, d x m.
template <MeanFieldModel M>
std::vector<double> lions_diffusion(const M& model, double t, std::span<const double> x, const EmpiricalMeasure& mu,
                                    std::span<const double> y, std::span<const double> v) {
  const auto j = evaluate_jet(model, t, x, mu);
  const auto d = static_cast<std::size_t>(model.dim()), m = static_cast<std::size_t>(model.noise_dim()),
             p = static_cast<std::size_t>(model.feature_dim());
  std::vector<double> out(d * m, 0.0);
  if (j.diffusion_dpsi.empty()) return out;
  std::vector<double> buf(p + p * d), dpsi(p, 0.0);
  model.features(y, buf);
  for (std::size_t q = 0; q < p; ++q)
    for (std::size_t c = 0; c < d; ++c) dpsi[q] += buf[p + q * d + c] * v[c];
  for (std::size_t e = 0; e < d * m; ++e)
    for (std::size_t q = 0; q < p; ++q) out[e] += j.diffusion_dpsi[e * p + q] * dpsi[q];
  return out;
}

// ---------------------------------------------------------------------------
// Self-checks

namespace detail {
// Smooth bump with bump(0) = 1 and support in the open unit ball.
inline double unit_bump(double r2) { return r2 < 1.0 ? std::exp(1.0 - 1.0 / (1.0 - r2)) : 0.0; }
}  // namespace detail

/// Finite-difference check of the declared Lions kernel. The measure is
/// pushed forward by id + eps phi, with phi = e_c times a smooth bump
/// centred at y whose support contains no other atom, and
///
///     d/deps b(x, mu o (id + eps phi)^-1) = (mult / N) D^L b(x, mu)(y) e_c.
///
/// When y is not an atom of mu it is appended first, so the kernel is
/// checked at the augmented measure. Returns the largest componentwise gap.
template <MeanFieldModel M>
double check_lions_kernel(const M& model, double t, std::span<const double> x, const EmpiricalMeasure& mu,
                          std::span<const double> y, double h) {
  if (!(h > 0.0)) throw ParameterError("check_lions_kernel: step h must be positive");
  const int d = model.dim();
  if (mu.dim() != d || static_cast<int>(y.size()) != d || static_cast<int>(x.size()) != d)
    throw DimensionError("check_lions_kernel: dimension mismatch");
  const auto dd = static_cast<std::size_t>(d);

  std::vector<double> pts(mu.flat().begin(), mu.flat().end());
  auto is_y = [&](std::size_t i) {
    for (std::size_t c = 0; c < dd; ++c)
      if (pts[i * dd + c] != y[c]) return false;
    return true;
  };
  std::size_t n = pts.size() / dd;
  std::size_t mult = 0;
  for (std::size_t i = 0; i < n; ++i) mult += is_y(i) ? 1 : 0;
  if (mult == 0) {
    pts.insert(pts.end(), y.begin(), y.end());
    ++n;
    mult = 1;
  }
  double radius = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    if (is_y(i)) continue;
    double r2 = 0.0;
    for (std::size_t c = 0; c < dd; ++c) r2 += (pts[i * dd + c] - y[c]) * (pts[i * dd + c] - y[c]);
    radius = std::min(radius, std::sqrt(r2));
  }
  radius = std::isfinite(radius) ? 0.5 * radius : 1.0;

  const EmpiricalMeasure base(pts, d);
  const auto declared = lions_drift(model, t, x, base, y);
  double worst = 0.0;
  for (std::size_t col = 0; col < dd; ++col) {
    auto shifted = [&](double eps) {
      std::vector<double> q = pts;
      for (std::size_t i = 0; i < n; ++i) {
        double r2 = 0.0;
        for (std::size_t c = 0; c < dd; ++c) r2 += (pts[i * dd + c] - y[c]) * (pts[i * dd + c] - y[c]);
        q[i * dd + col] += eps * detail::unit_bump(r2 / (radius * radius));
      }
      return drift(model, t, x, EmpiricalMeasure(std::move(q), d));
    };
    const auto plus = shifted(h), minus = shifted(-h);
    const double scale = static_cast<double>(n) / static_cast<double>(mult);
    for (std::size_t r = 0; r < dd; ++r) {
      const double fd = (plus[r] - minus[r]) / (2.0 * h) * scale;
      worst = std::max(worst, std::abs(fd - declared[r * dd + col]));
    }
  }
  return worst;
}

/// Largest gap between drift_grad and a central difference of the drift in x.
template <MeanFieldModel M>
double check_drift_grad(const M& model, double t, std::span<const double> x, const EmpiricalMeasure& mu, double h) {
  if (!(h > 0.0)) throw ParameterError("check_drift_grad: step h must be positive");
  const auto d = static_cast<std::size_t>(model.dim());
  const auto declared = drift_grad(model, t, x, mu);
  double worst = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    std::vector<double> xp(x.begin(), x.end()), xm(x.begin(), x.end());
    xp[c] += h;
    xm[c] -= h;
    const auto bp = drift(model, t, xp, mu), bm = drift(model, t, xm, mu);
    for (std::size_t r = 0; r < d; ++r)
      worst = std::max(worst, std::abs((bp[r] - bm[r]) / (2.0 * h) - declared[r * d + c]));
  }
  return worst;
}

/// Left side minus right side of the one-sided monotonicity condition
///   2<x - y, b(x, mu) - b(y, nu)>^+ + |sigma(x, mu) - sigma(y, nu)|_HS^2
///     <= K (|x - y|^2 + W_k(mu, nu)^2)
/// for d = 1 measures of equal size. Non-positive means the bound holds.
template <MeanFieldModel M>
double one_sided_bound_slack(const M& model, double t, std::span<const double> x, std::span<const double> y,
                             const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  const auto adm = model.admissibility();
  const auto jx = evaluate_jet(model, t, x, mu), jy = evaluate_jet(model, t, y, nu);
  double inner = 0.0, dist2 = 0.0, hs = 0.0;
  for (std::size_t c = 0; c < x.size(); ++c) {
    inner += (x[c] - y[c]) * (jx.drift[c] - jy.drift[c]);
    dist2 += (x[c] - y[c]) * (x[c] - y[c]);
  }
  for (std::size_t e = 0; e < jx.diffusion.size(); ++e)
    hs += (jx.diffusion[e] - jy.diffusion[e]) * (jx.diffusion[e] - jy.diffusion[e]);
  const double w = mu.dim() == 1 ? wasserstein_1d(mu, nu, adm.k) : wasserstein_assignment(mu, nu, adm.k);
  return 2.0 * std::max(inner, 0.0) + hs - adm.lipschitz_K * (dist2 + w * w);
}

}  // namespace mfchaos
