#pragma once

// Monte Carlo estimators of the intrinsic derivative D_phi^I E f(X_T): the
// particle Bismut weight, the limit weight zeta, common-noise central
// differences and the pathwise gradient E<grad f(X_T), v_T>.

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mfchaos/derivative_sim.hpp"
#include "mfchaos/errors.hpp"
#include "mfchaos/fit.hpp"
#include "mfchaos/measures.hpp"
#include "mfchaos/parallel.hpp"
#include "mfchaos/particle_sim.hpp"

namespace mfchaos {

struct TestFunction {
  std::string id;
  std::function<double(std::span<const double>)> f;
  std::function<void(std::span<const double>, std::span<double>)> grad;
  double hess_bound = 0.0;

  static TestFunction x1() {
    return {"x1", [](std::span<const double> x) { return x[0]; },
            [](std::span<const double>, std::span<double> g) {
              for (auto& v : g) v = 0.0;
              g[0] = 1.0;
            },
            0.0};
  }
  static TestFunction tanh1() {
    return {"tanh", [](std::span<const double> x) { return std::tanh(x[0]); },
            [](std::span<const double> x, std::span<double> g) {
              for (auto& v : g) v = 0.0;
              const double c = 1.0 / std::cosh(x[0]);
              g[0] = c * c;
            },
            4.0 / (3.0 * std::sqrt(3.0))};
  }
  static TestFunction cos1() {
    return {"cos", [](std::span<const double> x) { return std::cos(x[0]); },
            [](std::span<const double> x, std::span<double> g) {
              for (auto& v : g) v = 0.0;
              g[0] = -std::sin(x[0]);
            },
            1.0};
  }
  static TestFunction constant(double c) {
    return {"constant", [c](std::span<const double>) { return c; },
            [](std::span<const double>, std::span<double> g) {
              for (auto& v : g) v = 0.0;
            },
            0.0};
  }
};

inline TestFunction test_function(const std::string& id) {
  if (id == "x1") return TestFunction::x1();
  if (id == "tanh") return TestFunction::tanh1();
  if (id == "cos") return TestFunction::cos1();
  if (id == "constant") return TestFunction::constant(1.0);
  throw ConfigError("unknown test function '" + id + "' (expected x1, tanh, cos or constant)");
}

/// Largest gap between grad and a central difference of f at the points.
inline double check_test_gradient(const TestFunction& tf, std::span<const double> pts, int d, double h = 1e-5) {
  const auto dd = static_cast<std::size_t>(d);
  std::vector<double> g(dd), xp(dd), xm(dd);
  double worst = 0.0;
  for (std::size_t i = 0; i + dd <= pts.size(); i += dd) {
    const auto x = pts.subspan(i, dd);
    tf.grad(x, g);
    for (std::size_t c = 0; c < dd; ++c) {
      std::copy(x.begin(), x.end(), xp.begin());
      std::copy(x.begin(), x.end(), xm.begin());
      xp[c] += h;
      xm[c] -= h;
      worst = std::max(worst, std::abs((tf.f(xp) - tf.f(xm)) / (2.0 * h) - g[c]));
    }
  }
  return worst;
}

enum class EstimatorMethod { kBsmnParticle, kZetaLimit, kFiniteDifference, kPathwiseGrad };

inline std::string method_name(EstimatorMethod m) {
  switch (m) {
    case EstimatorMethod::kBsmnParticle: return "bsmn_particle";
    case EstimatorMethod::kZetaLimit: return "zeta_limit";
    case EstimatorMethod::kFiniteDifference: return "finite_difference";
    case EstimatorMethod::kPathwiseGrad: return "pathwise_grad";
  }
  return "unknown";
}

struct IntrinsicDerivEstimate {
  double value = 0.0;
  double std_error = 0.0;
  std::size_t replications = 0;
  EstimatorMethod method = EstimatorMethod::kBsmnParticle;
  std::vector<double> samples;  // one per replication, in replication order
};

enum class Which { kParticle, kLimit };

/// Common inputs of every estimator. Replication r uses the bank and initial
/// positions of replication_bank_seed / replication_init_seed(seed, r).
struct BismutRun {
  TimeGrid grid{1.0, 1000};
  InitialLaw init = InitialLaw::uniform(-1.0, 1.0);
  DirectionSpec phi = DirectionSpec::constant(1.0);
  std::size_t N = 512;
  std::size_t replications = 64;
  std::uint64_t seed = 0;
  int threads = 1;
};

namespace detail {

inline IntrinsicDerivEstimate summarize(std::vector<double> samples, EstimatorMethod method) {
  if (samples.size() < 2) throw ParameterError("estimator needs at least 2 replications");
  const auto est = mean_estimate(samples);
  IntrinsicDerivEstimate out;
  out.value = est.value;
  out.std_error = est.std_error;
  out.replications = samples.size();
  out.method = method;
  out.samples = std::move(samples);
  return out;
}

inline void check_replications(std::size_t r) {
  if (r < 2) throw ParameterError("replications must be at least 2, got " + std::to_string(r));
}

inline double mean_f(const TestFunction& tf, std::span<const double> xs, int d) {
  const auto dd = static_cast<std::size_t>(d);
  double s = 0.0;
  for (std::size_t i = 0; i < xs.size(); i += dd) s += tf.f(xs.subspan(i, dd));
  return s / static_cast<double>(xs.size() / dd);
}

template <MeanFieldModel M>
CoupledResult replicate(const M& model, const BismutRun& run, std::size_t r, std::size_t N, CoupledInputs in,
                        const CoupledOptions& opt) {
  const auto bank = make_noise_bank(replication_bank_seed(run.seed, r), N, run.grid, model.noise_dim());
  if (in.x0.empty()) in.x0 = sample_initial(run.init, replication_init_seed(run.seed, r), N, model.dim());
  return run_coupled(model, run.grid, bank, N, in, opt);
}

inline CoupledOptions positions_only() {
  CoupledOptions o;
  o.limit = false;
  o.directional = false;
  o.malliavin = false;
  o.bismut = false;
  o.metrics.wasserstein = false;
  return o;
}

/// Particle Bismut sample of one replication:
///   (1/N) sum_k (f(X_T^k) - c) * sum_i sum_n <h'^i_n, dW^i_n>.
inline double bsmn_sample(const TestFunction& tf, const CoupledResult& res, double c) {
  const auto d = static_cast<std::size_t>(res.d);
  double fs = 0.0;
  for (std::size_t k = 0; k < res.N; ++k) fs += tf.f(std::span<const double>(res.x_T).subspan(k * d, d)) - c;
  double is = 0.0;
  for (double v : res.bismut_particle) is += v;
  return fs / static_cast<double>(res.N) * is;
}

/// Limit sample: (1/N) sum_i (f(Y_T^i) - c) * sum_n <zeta^i_n, dW^i_n>.
inline double zeta_sample(const TestFunction& tf, const CoupledResult& res, double c) {
  const auto d = static_cast<std::size_t>(res.d);
  double s = 0.0;
  for (std::size_t i = 0; i < res.N; ++i)
    s += (tf.f(std::span<const double>(res.y_T).subspan(i * d, d)) - c) * res.bismut_limit[i];
  return s / static_cast<double>(res.N);
}

}  // namespace detail

/// Control-variate constant for the Bismut weights: the mean of f over an
/// independent pilot cloud of max(N, 4096) particles at T. Any constant keeps
/// the estimators unbiased because the weights have mean zero.
template <MeanFieldModel M>
double pilot_constant(const M& model, const TestFunction& tf, const BismutRun& run) {
  const std::size_t n = std::max<std::size_t>(run.N, 4096);
  const auto bank = make_noise_bank(derive_seed(run.seed, seed_tags::kPilotBank), n, run.grid, model.noise_dim(),
                                    run.threads);
  CoupledInputs in;
  in.x0 = sample_initial(run.init, derive_seed(run.seed, seed_tags::kPilotInit), n, model.dim());
  const auto res = run_coupled(model, run.grid, bank, n, in, detail::positions_only());
  return detail::mean_f(tf, res.x_T, model.dim());
}

/// Mean of f over the frozen law at T, or the pilot constant when the law
/// carries no positions.
template <MeanFieldModel M>
double law_constant(const M& model, const TestFunction& tf, const BismutRun& run, const LimitSetup& setup) {
  if (setup.law && setup.law->has_positions())
    return detail::mean_f(tf, setup.law->positions_at(run.grid.n_steps), model.dim());
  return pilot_constant(model, tf, run);
}

/// Particle Bismut estimator with the N-sum over stochastic integrals taken
/// exactly and the f-factor averaged over all exchangeable particles.
template <MeanFieldModel M>
IntrinsicDerivEstimate estimate_bsmn_particle(const M& model, const TestFunction& tf, const WeightFunction& weight,
                                              const BismutRun& run, bool control_variate = true) {
  detail::check_replications(run.replications);
  detail::require_h2(model);
  const double c = control_variate ? pilot_constant(model, tf, run) : 0.0;
  CoupledOptions opt = detail::positions_only();
  opt.bismut = true;
  std::vector<double> samples(run.replications);
  parallel_for(run.replications, run.threads, [&](std::size_t r) {
    CoupledInputs in;
    in.weight = &weight;
    in.phi = run.phi;
    const auto res = detail::replicate(model, run, r, run.N, std::move(in), opt);
    samples[r] = detail::bsmn_sample(tf, res, c);
  });
  return detail::summarize(std::move(samples), EstimatorMethod::kBsmnParticle);
}

/// Limit estimator E[f(X_T) int <zeta, dW>] over i.i.d. copies driven by the
/// frozen law; each replication contributes the average over run.N copies.
template <MeanFieldModel M>
IntrinsicDerivEstimate estimate_zeta_limit(const M& model, const TestFunction& tf, const WeightFunction& weight,
                                           const BismutRun& run, const LimitSetup& setup,
                                           bool control_variate = true) {
  detail::check_replications(run.replications);
  detail::require_h2(model);
  if (!setup.law || !setup.aux) throw ConfigError("estimate_zeta_limit: frozen law and auxiliary ensemble required");
  const double c = control_variate ? law_constant(model, tf, run, setup) : 0.0;
  CoupledOptions opt;
  opt.malliavin = false;
  opt.metrics.wasserstein = false;
  std::vector<double> samples(run.replications);
  parallel_for(run.replications, run.threads, [&](std::size_t r) {
    CoupledInputs in;
    in.law = setup.law;
    in.aux = setup.aux.get();
    in.weight = &weight;
    in.phi = run.phi;
    const auto res = detail::replicate(model, run, r, run.N, std::move(in), opt);
    samples[r] = detail::zeta_sample(tf, res, c);
  });
  return detail::summarize(std::move(samples), EstimatorMethod::kZetaLimit);
}

/// Central difference in the initial perturbation with common noise:
///   (E f(X_T^{+eps}) - E f(X_T^{-eps})) / (2 eps),
/// X_0^{+-} = X_0 +- eps phi(X_0). The limit variant also shifts the initial
/// cloud of the reference run, so the frozen law moves with the perturbation.
template <MeanFieldModel M>
IntrinsicDerivEstimate finite_difference_intrinsic(const M& model, const TestFunction& tf, double eps, Which which,
                                                   const BismutRun& run, const LimitSetupOptions& lopt = {}) {
  if (!(eps > 0.0)) throw ParameterError("finite_difference_intrinsic: eps must be positive");
  detail::check_replications(run.replications);
  const int d = model.dim();
  auto shifted = [&](std::vector<double> x0, double s) {
    const auto dir = initial_directions(run.phi, x0, d);
    for (std::size_t e = 0; e < x0.size(); ++e) x0[e] += s * dir[e];
    return x0;
  };
  std::shared_ptr<const FrozenLaw> law_plus, law_minus;
  if (which == Which::kLimit) {
    const auto bank = make_noise_bank(derive_seed(lopt.seed, seed_tags::kReferenceBank), lopt.M_ref, run.grid,
                                      model.noise_dim(), lopt.threads);
    const auto x0 = sample_initial(run.init, derive_seed(lopt.seed, seed_tags::kReferenceInit), lopt.M_ref, d);
    law_plus = std::make_shared<const FrozenLaw>(run_reference_from(model, shifted(x0, eps), bank, run.grid, false));
    law_minus = std::make_shared<const FrozenLaw>(run_reference_from(model, shifted(x0, -eps), bank, run.grid, false));
  }
  CoupledOptions opt = detail::positions_only();
  opt.limit = which == Which::kLimit;
  std::vector<double> samples(run.replications);
  parallel_for(run.replications, run.threads, [&](std::size_t r) {
    const auto x0 = sample_initial(run.init, replication_init_seed(run.seed, r), run.N, d);
    CoupledInputs plus, minus;
    plus.x0 = shifted(x0, eps);
    minus.x0 = shifted(x0, -eps);
    plus.law = law_plus;
    minus.law = law_minus;
    const auto rp = detail::replicate(model, run, r, run.N, std::move(plus), opt);
    const auto rm = detail::replicate(model, run, r, run.N, std::move(minus), opt);
    const auto& xp = which == Which::kLimit ? rp.y_T : rp.x_T;
    const auto& xm = which == Which::kLimit ? rm.y_T : rm.x_T;
    samples[r] = (detail::mean_f(tf, xp, d) - detail::mean_f(tf, xm, d)) / (2.0 * eps);
  });
  return detail::summarize(std::move(samples), EstimatorMethod::kFiniteDifference);
}

/// E<grad f(X_T), v_T> averaged over the exchangeable particles (or copies).
template <MeanFieldModel M>
IntrinsicDerivEstimate pathwise_grad(const M& model, const TestFunction& tf, Which which, const BismutRun& run,
                                     const LimitSetup* setup = nullptr) {
  detail::check_replications(run.replications);
  if (which == Which::kLimit && (setup == nullptr || !setup->law || !setup->aux))
    throw ConfigError("pathwise_grad: the limit variant needs a frozen law and an auxiliary ensemble");
  const auto d = static_cast<std::size_t>(model.dim());
  CoupledOptions opt = detail::positions_only();
  opt.directional = true;
  opt.limit = which == Which::kLimit;
  std::vector<double> samples(run.replications);
  parallel_for(run.replications, run.threads, [&](std::size_t r) {
    CoupledInputs in;
    in.phi = run.phi;
    if (setup != nullptr) {
      in.law = setup->law;
      in.aux = setup->aux.get();
    }
    const auto res = detail::replicate(model, run, r, run.N, std::move(in), opt);
    const auto& x = which == Which::kLimit ? res.y_T : res.x_T;
    const auto& v = which == Which::kLimit ? res.u_T : res.v_T;
    std::vector<double> g(d);
    double s = 0.0;
    for (std::size_t i = 0; i < run.N; ++i) {
      tf.grad(std::span<const double>(x).subspan(i * d, d), g);
      for (std::size_t c = 0; c < d; ++c) s += g[c] * v[i * d + c];
    }
    samples[r] = s / static_cast<double>(run.N);
  });
  return detail::summarize(std::move(samples), EstimatorMethod::kPathwiseGrad);
}

/// Mean and standard error of a - b over paired replications.
inline MomentEstimate paired_difference(const IntrinsicDerivEstimate& a, const IntrinsicDerivEstimate& b) {
  if (a.samples.size() != b.samples.size()) throw DimensionError("paired_difference: replication counts differ");
  std::vector<double> diff(a.samples.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = a.samples[i] - b.samples[i];
  return mean_estimate(diff);
}

struct ConvergenceRow {
  std::size_t N = 0;
  double particle = 0.0;    // mean bsmn sample
  double limit = 0.0;       // mean zeta sample
  double gap = 0.0;         // |mean of paired differences|
  double gap_se = 0.0;
};

struct ConvergenceTable {
  std::vector<ConvergenceRow> rows;
  std::optional<FitResult> fit;
  std::string fit_error;
};

/// |D^I(P^N f) - D^I(P f)| along the ladder from paired replications: both
/// weights of replication r use the same bank prefix and initial positions.
template <MeanFieldModel M>
ConvergenceTable compare_convergence(const M& model, const TestFunction& tf, const WeightFunction& weight,
                                     const std::vector<std::size_t>& ladder, const BismutRun& run,
                                     const LimitSetup& setup) {
  detail::check_replications(run.replications);
  detail::require_h2(model);
  if (!setup.law || !setup.aux) throw ConfigError("compare_convergence: frozen law and auxiliary ensemble required");
  const double c = law_constant(model, tf, run, setup);
  CoupledOptions opt;
  opt.malliavin = false;
  opt.metrics.wasserstein = false;
  ConvergenceTable table;
  std::vector<FitPoint> pts;
  for (std::size_t N : ladder) {
    std::vector<double> ps(run.replications), ls(run.replications);
    parallel_for(run.replications, run.threads, [&](std::size_t r) {
      CoupledInputs in;
      in.law = setup.law;
      in.aux = setup.aux.get();
      in.weight = &weight;
      in.phi = run.phi;
      const auto res = detail::replicate(model, run, r, N, std::move(in), opt);
      ps[r] = detail::bsmn_sample(tf, res, c);
      ls[r] = detail::zeta_sample(tf, res, c);
    });
    std::vector<double> diff(run.replications);
    for (std::size_t r = 0; r < diff.size(); ++r) diff[r] = ps[r] - ls[r];
    const auto de = mean_estimate(diff);
    ConvergenceRow row;
    row.N = N;
    row.particle = mean_estimate(ps).value;
    row.limit = mean_estimate(ls).value;
    row.gap = std::abs(de.value);
    row.gap_se = de.std_error;
    table.rows.push_back(row);
    pts.push_back({static_cast<double>(N), row.gap, row.gap_se});
  }
  try {
    table.fit = fit_rate(pts);
  } catch (const FitError& e) {
    table.fit_error = e.what();
  }
  return table;
}

}  // namespace mfchaos
