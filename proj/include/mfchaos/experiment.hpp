#pragma once

// N-ladder experiments: the seven tracked gap quantities, their slope fits,
// theory curves and the rates.csv / report.json outputs.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfchaos/bismut.hpp"
#include "mfchaos/config.hpp"
#include "mfchaos/derivative_sim.hpp"
#include "mfchaos/fit.hpp"
#include "mfchaos/models.hpp"
#include "mfchaos/particle_sim.hpp"
#include "mfchaos/theory.hpp"

namespace mfchaos {

inline const std::vector<std::string>& quantity_ids() {
  static const std::vector<std::string> ids{"pos_gap",  "wass_gap",   "dir_gap",  "mall_gap",
                                            "hhat_gap", "bismut_gap", "zeta_diag"};
  return ids;
}

struct RatePoint {
  std::size_t N = 0;
  double moment = 0.0;
  double std_error = 0.0;
  double theory_rate = 0.0;
  std::map<std::string, double> extras;
};

struct RateReport {
  std::string quantity;
  double k = 2.0;
  std::vector<RatePoint> points;
  std::optional<FitResult> fit;
  std::string fit_error;
  double exponent = 1.0;  // power applied to eps(N) for theory_rate
  std::vector<double> reference_slopes;
  std::string verdict = "no_fit";
};

struct ExperimentResult {
  std::vector<RateReport> reports;
  bool complete = false;
  std::string error;
};

// ---------------------------------------------------------------------------
// Config to objects

/// Calls fn with the concrete model named in the config.
template <class F>
decltype(auto) with_model(const ExperimentConfig& c, F&& fn) {
  auto checked = [&](const auto& model) -> decltype(auto) {
    if (model.dim() != c.d)
      throw ConfigError("model '" + c.model_id + "' has dimension " + std::to_string(model.dim()) + ", config says " +
                        std::to_string(c.d));
    if (model.noise_dim() != c.m)
      throw ConfigError("model '" + c.model_id + "' has noise dimension " + std::to_string(model.noise_dim()) +
                        ", config says " + std::to_string(c.m));
    return fn(model);
  };
  if (c.model_id == "mf_ou")
    return checked(make_mf_ou_model(c.param("a", -1.0), c.param("b", 0.5), c.param("sigma", 0.3), c.d));
  if (c.model_id == "kuramoto") return checked(make_kuramoto_model(c.param("kappa", 1.0), c.param("sigma", 0.5)));
  if (c.model_id == "double_well")
    return checked(make_double_well_model(c.param("theta", 1.0), c.param("kappa", 0.5), c.param("sigma", 0.5)));
  throw ConfigError("unknown model id '" + c.model_id + "'");
}

inline DirectionSpec direction_from(const ExperimentConfig& c) {
  if (c.direction == "zero") return DirectionSpec::zero();
  if (c.direction == "constant") return DirectionSpec::constant(c.direction_scale);
  if (c.direction == "linear") return DirectionSpec::linear(c.direction_scale, c.direction_offset);
  if (c.direction == "tanh") return DirectionSpec::tanh(c.direction_scale);
  throw ConfigError("unknown direction.phi '" + c.direction + "' (expected zero, constant, linear or tanh)");
}

inline WeightFunction weight_from(const ExperimentConfig& c, const TimeGrid& grid) {
  return WeightFunction::make(c.g_shape == "sin2" ? WeightFunction::Shape::kSin2 : WeightFunction::Shape::kLinear,
                              grid, c.r);
}

inline LimitSetupOptions limit_options_from(const ExperimentConfig& c, int threads) {
  LimitSetupOptions o;
  o.M_ref = c.M_ref;
  o.M_aux = c.M_aux;
  o.min_ref = 8 * c.N_ladder.back();
  o.seed = c.seed;
  o.prefer_analytic = c.analytic_law;
  o.store_positions = true;
  o.need_aux = true;
  o.threads = threads;
  return o;
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline void finish_report(RateReport& rep, double k, int d, double q) {
  std::vector<FitPoint> pts;
  for (const auto& p : rep.points) pts.push_back({static_cast<double>(p.N), p.moment, p.std_error});
  try {
    rep.fit = fit_rate(pts);
  } catch (const FitError& e) {
    rep.fit_error = e.what();
  }
  const bool zeta = rep.quantity == "zeta_diag";
  if (zeta) {
    rep.reference_slopes = {-k, -k / 2.0};
    rep.verdict = rep.fit ? "informational" : "no_fit";
    return;
  }
  if (rep.points.size() >= 2) {
    const double lo = static_cast<double>(rep.points.front().N), hi = static_cast<double>(rep.points.back().N);
    rep.reference_slopes = {theory_slope(lo, hi, k, d, q, rep.exponent)};
  }
  if (!rep.fit) {
    rep.verdict = "no_fit";
    return;
  }
  if (rep.reference_slopes.empty()) {
    rep.verdict = "no_reference";
    return;
  }
  rep.verdict = rep.fit->slope <= rep.reference_slopes.front() + 0.15 ? "consistent" : "slower_than_theory";
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline void write_rates_csv(const std::vector<RateReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "quantity,N,k,moment,std_error,theory_rate\n";
  for (const auto& r : reports)
    for (const auto& p : r.points)
      out << r.quantity << ',' << p.N << ',' << detail::format_double(r.k) << ',' << detail::format_double(p.moment)
          << ',' << detail::format_double(p.std_error) << ',' << detail::format_double(p.theory_rate) << '\n';
}

inline nlohmann::json report_json(const RateReport& r) {
  nlohmann::json j;
  j["quantity"] = r.quantity;
  j["k"] = r.k;
  j["exponent"] = r.exponent;
  j["verdict"] = r.verdict;
  j["reference_slopes"] = r.reference_slopes;
  auto pts = nlohmann::json::array();
  for (const auto& p : r.points) {
    nlohmann::json e{{"N", p.N}, {"moment", p.moment}, {"std_error", p.std_error}, {"theory_rate", p.theory_rate}};
    for (const auto& [key, v] : p.extras) e[key] = v;
    pts.push_back(std::move(e));
  }
  j["points"] = std::move(pts);
  if (r.fit) {
    j["fit"] = {{"slope", r.fit->slope},
                {"intercept", r.fit->intercept},
                {"slope_se", r.fit->slope_se},
                {"ci_low", r.fit->ci_low},
                {"ci_high", r.fit->ci_high},
                {"reduced_chi2", r.fit->reduced_chi2},
                {"points_used", r.fit->points_used},
                {"weighted", r.fit->weighted},
                {"warnings", r.fit->warnings}};
  } else {
    j["fit"] = nullptr;
    j["fit_error"] = r.fit_error;
  }
  return j;
}

inline void write_report_json(const ExperimentConfig& c, const ExperimentResult& res,
                              const std::filesystem::path& path) {
  nlohmann::json j;
  j["model"] = c.model_id;
  j["seed"] = c.seed;
  j["T"] = c.T;
  j["n_steps"] = c.n_steps;
  j["N_ladder"] = c.N_ladder;
  j["replications"] = c.replications;
  j["M_ref"] = c.M_ref;
  j["M_aux"] = c.M_aux;
  j["k"] = c.k;
  j["direction"] = c.direction;
  j["complete"] = res.complete;
  if (!res.error.empty()) j["error"] = res.error;
  auto reps = nlohmann::json::array();
  for (const auto& r : res.reports) reps.push_back(report_json(r));
  j["reports"] = std::move(reps);
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline void write_outputs(const ExperimentConfig& c, const ExperimentResult& res, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_rates_csv(res.reports, dir / "rates.csv");
  write_report_json(c, res, dir / "report.json");
}

// ---------------------------------------------------------------------------
// Path dump

/// Particle and limit-copy paths of replication 0 at size N, one row per
/// (index, node): index,t,x[,x1..],y[,y1..].
template <MeanFieldModel M>
void dump_paths(const M& model, const ExperimentConfig& c, const LimitSetup& setup, std::size_t N,
                const std::filesystem::path& path) {
  const TimeGrid grid(c.T, c.n_steps);
  const auto init = c.initial_law();
  const auto bank = make_noise_bank(replication_bank_seed(c.seed, 0), N, grid, model.noise_dim());
  const auto x0 = sample_initial(init, replication_init_seed(c.seed, 0), N, model.dim());
  const auto d = static_cast<std::size_t>(model.dim());
  const std::size_t nodes = static_cast<std::size_t>(grid.nodes());
  std::vector<double> xs(nodes * N * d), ys;
  ParticleCloud pc{model.dim(), 0, x0};
  std::optional<LimitCloud> lc;
  if (setup.law) {
    lc = LimitCloud{ParticleCloud{model.dim(), 0, x0}, setup.law};
    ys.resize(xs.size());
  }
  for (int n = 0;; ++n) {
    std::copy(pc.x.begin(), pc.x.end(), xs.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(n) * N * d));
    if (lc)
      std::copy(lc->copies.x.begin(), lc->copies.x.end(),
                ys.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(n) * N * d));
    if (n == grid.n_steps) break;
    pc = step_particles(model, std::move(pc), bank, grid);
    if (lc) *lc = step_limit_copies(model, std::move(*lc), bank, grid);
  }
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "index,t";
  for (std::size_t q = 0; q < d; ++q) out << ",x" << (d > 1 ? std::to_string(q) : "");
  if (lc)
    for (std::size_t q = 0; q < d; ++q) out << ",y" << (d > 1 ? std::to_string(q) : "");
  out << '\n';
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t n = 0; n < nodes; ++n) {
      out << i << ',' << detail::format_double(grid.t(static_cast<int>(n)));
      for (std::size_t q = 0; q < d; ++q) out << ',' << detail::format_double(xs[(n * N + i) * d + q]);
      if (lc)
        for (std::size_t q = 0; q < d; ++q) out << ',' << detail::format_double(ys[(n * N + i) * d + q]);
      out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Ladder

namespace detail {

struct RepSample {
  double pos = 0.0, dir = 0.0, mall = 0.0, hhat = 0.0, zeta = 0.0;
  double bsmn = 0.0, zlim = 0.0;
  std::vector<double> wk;  // per node, W_k^k
};

inline double mean_pow(const std::vector<double>& xs, double k, std::size_t count) {
  count = std::min(count, xs.size());
  if (count == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < count; ++i) s += std::pow(xs[i], k);
  return s / static_cast<double>(count);
}

template <class Get>
MomentEstimate estimate_over(const std::vector<RepSample>& reps, double k, Get get) {
  std::vector<double> v(reps.size());
  for (std::size_t r = 0; r < reps.size(); ++r) v[r] = get(reps[r]);
  return mean_estimate(v, k);
}

}  // namespace detail

/// Runs the full ladder for a concrete model. Replication r at every N uses
/// the bank and initial positions of seed r, so smaller ladder points are
/// prefixes of larger ones. Outputs are flushed to cfg.out_dir, including a
/// partial report when a step fails (the error is then rethrown).
template <MeanFieldModel M>
ExperimentResult run_experiment(const M& model, const ExperimentConfig& cfg, int threads = 1, bool write = true) {
  cfg.validate();
  const TimeGrid grid(cfg.T, cfg.n_steps);
  const auto init = cfg.initial_law();
  const auto phi = direction_from(cfg);
  const auto weight = weight_from(cfg, grid);
  const double k = cfg.k;
  const int d = model.dim();
  const double q = cfg.moment_q();
  const auto adm = model.admissibility();
  const double expo = theoretical_exponent(adm.holder_alpha, q, k, adm.growth_m);

  ExperimentResult res;
  for (const auto& id : quantity_ids()) {
    RateReport r;
    r.quantity = id;
    r.k = k;
    r.exponent = (id == "pos_gap" || id == "wass_gap") ? 1.0 : expo;
    res.reports.push_back(std::move(r));
  }
  auto report = [&](const std::string& id) -> RateReport& {
    for (auto& r : res.reports)
      if (r.quantity == id) return r;
    throw ConfigError("unknown quantity " + id);
  };

  const std::filesystem::path out_dir(cfg.out_dir);
  try {
    const auto setup = build_limit_setup(model, grid, init, phi, limit_options_from(cfg, threads));
    const bool bismut = cfg.bismut && model.dist_free_diffusion();
    std::optional<TestFunction> tf;
    double c = 0.0;
    if (bismut) {
      tf = test_function(cfg.test_function);
      BismutRun br;
      br.grid = grid;
      br.init = init;
      br.phi = phi;
      br.N = cfg.N_ladder.back();
      br.seed = cfg.seed;
      br.threads = threads;
      c = law_constant(model, *tf, br, setup);
    }
    if (cfg.dump_paths && write) {
      std::filesystem::create_directories(out_dir);
      dump_paths(model, cfg, setup, cfg.N_ladder.front(),
                 out_dir / ("paths_N" + std::to_string(cfg.N_ladder.front()) + ".csv"));
    }
    CoupledOptions opt;
    opt.tagged = cfg.tagged;
    opt.bismut = bismut;
    opt.metrics.k = k;
    opt.metrics.wasserstein = d == 1;
    opt.metrics.subsample_seed = derive_seed(cfg.seed, seed_tags::kSubsample);
    opt.zeta_node = grid.n_steps / 2;
    opt.zeta_k = k;

    for (std::size_t N : cfg.N_ladder) {
      std::vector<detail::RepSample> reps(cfg.replications);
      parallel_for(cfg.replications, threads, [&](std::size_t r) {
        const auto bank = make_noise_bank(replication_bank_seed(cfg.seed, r), N, grid, model.noise_dim());
        CoupledInputs in;
        in.law = setup.law;
        in.aux = setup.aux.get();
        in.weight = &weight;
        in.phi = phi;
        in.x0 = sample_initial(init, replication_init_seed(cfg.seed, r), N, d);
        const auto out = run_coupled(model, grid, bank, N, in, opt);
        auto& s = reps[r];
        s.pos = detail::mean_pow(out.paths.sup_gap, k, N);
        s.dir = detail::mean_pow(out.dir_sup, k, N);
        s.mall = detail::mean_pow(out.mall_sup, k, out.mall_sup.size());
        s.hhat = detail::mean_pow(out.hhat_sup, k, out.hhat_sup.size());
        s.zeta = out.zeta_moment;
        s.wk.resize(out.paths.wk.size());
        for (std::size_t n = 0; n < s.wk.size(); ++n) s.wk[n] = std::pow(out.paths.wk[n], k);
        if (bismut) {
          s.bsmn = detail::bsmn_sample(*tf, out, c);
          s.zlim = detail::zeta_sample(*tf, out, c);
        }
      });

      const double eps = epsilon_rate(static_cast<double>(N), k, d, q);
      auto add = [&](const std::string& id, const MomentEstimate& e) -> RatePoint& {
        auto& rep = report(id);
        RatePoint p;
        p.N = N;
        p.moment = e.value;
        p.std_error = e.std_error;
        p.theory_rate = id == "zeta_diag" ? std::pow(static_cast<double>(N), -k) : std::pow(eps, rep.exponent);
        rep.points.push_back(std::move(p));
        return rep.points.back();
      };
      add("pos_gap", detail::estimate_over(reps, k, [](const auto& s) { return s.pos; }));
      if (d == 1 && !reps.empty() && !reps.front().wk.empty()) {
        std::size_t best = 0;
        double best_v = -1.0;
        for (std::size_t n = 0; n < reps.front().wk.size(); ++n) {
          double m = 0.0;
          for (const auto& s : reps) m += s.wk[n];
          if (m > best_v) {
            best_v = m;
            best = n;
          }
        }
        auto& p = add("wass_gap", detail::estimate_over(reps, k, [&](const auto& s) { return s.wk[best]; }));
        p.extras["argmax_t"] = grid.t(static_cast<int>(best));
      }
      add("dir_gap", detail::estimate_over(reps, k, [](const auto& s) { return s.dir; }));
      add("mall_gap", detail::estimate_over(reps, k, [](const auto& s) { return s.mall; }));
      add("hhat_gap", detail::estimate_over(reps, k, [](const auto& s) { return s.hhat; }));
      if (bismut) {
        const auto diff = detail::estimate_over(reps, 1.0, [](const auto& s) { return s.bsmn - s.zlim; });
        const auto pe = detail::estimate_over(reps, 1.0, [](const auto& s) { return s.bsmn; });
        const auto le = detail::estimate_over(reps, 1.0, [](const auto& s) { return s.zlim; });
        auto& p = add("bismut_gap", {1.0, std::abs(diff.value), diff.replication_count, diff.std_error});
        p.extras["particle"] = pe.value;
        p.extras["particle_se"] = pe.std_error;
        p.extras["limit"] = le.value;
        p.extras["limit_se"] = le.std_error;
        p.extras["signed_gap"] = diff.value;
      }
      add("zeta_diag", detail::estimate_over(reps, k, [](const auto& s) { return s.zeta; }));
      if (write) write_outputs(cfg, res, out_dir);
    }
    for (auto& r : res.reports) detail::finish_report(r, k, d, q);
    res.complete = true;
    if (write) write_outputs(cfg, res, out_dir);
  } catch (const std::exception& e) {
    res.error = e.what();
    if (write) {
      try {
        write_outputs(cfg, res, out_dir);
      } catch (...) {
      }
    }
    throw;
  }
  return res;
}

/// Config-level entry point: dispatches on the model id.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, int threads = 1, bool write = true) {
  return with_model(cfg, [&](const auto& model) { return run_experiment(model, cfg, threads, write); });
}

/// E|zeta_t^{1,N}|^k at t = T/2 over the ladder, from limit copies coupled to
/// the frozen law and auxiliary pairing. Reference slopes are -k and -k/2.
template <MeanFieldModel M>
RateReport zeta_diagnostic(const M& model, const std::vector<std::size_t>& ladder, const TimeGrid& grid,
                           const InitialLaw& init, const DirectionSpec& phi, const LimitSetup& setup,
                           std::size_t replications, std::uint64_t seed, double k, int threads = 1) {
  if (!setup.law || !setup.aux) throw ConfigError("zeta_diagnostic: frozen law and auxiliary ensemble required");
  if (replications < 2) throw ParameterError("zeta_diagnostic: need at least 2 replications");
  CoupledOptions opt;
  opt.malliavin = false;
  opt.bismut = false;
  opt.metrics.wasserstein = false;
  opt.zeta_node = grid.n_steps / 2;
  opt.zeta_k = k;
  RateReport rep;
  rep.quantity = "zeta_diag";
  rep.k = k;
  for (std::size_t N : ladder) {
    std::vector<double> vals(replications);
    parallel_for(replications, threads, [&](std::size_t r) {
      const auto bank = make_noise_bank(replication_bank_seed(seed, r), N, grid, model.noise_dim());
      CoupledInputs in;
      in.law = setup.law;
      in.aux = setup.aux.get();
      in.phi = phi;
      in.x0 = sample_initial(init, replication_init_seed(seed, r), N, model.dim());
      vals[r] = run_coupled(model, grid, bank, N, in, opt).zeta_moment;
    });
    const auto e = mean_estimate(vals, k);
    rep.points.push_back({N, e.value, e.std_error, std::pow(static_cast<double>(N), -k), {}});
  }
  detail::finish_report(rep, k, model.dim(), std::numeric_limits<double>::infinity());
  return rep;
}

}  // namespace mfchaos
