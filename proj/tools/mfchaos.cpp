// mfchaos command-line driver.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mfchaos/experiment.hpp"

namespace {

using namespace mfchaos;

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool config_required) {
  auto* opt = app->add_option("--config", c.config, "TOML experiment config");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "override ladder.seed")->each([&c](const std::string&) { c.seed_set = true; });
  app->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  app->add_option("--out", c.out, "override output.dir");
}

ExperimentConfig load(const Common& c) {
  auto cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed_set) cfg.seed = c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

std::string fmt(double v, const char* f = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int cmd_simulate(const Common& c, std::size_t N) {
  const auto cfg = load(c);
  const TimeGrid grid(cfg.T, cfg.n_steps);
  const std::size_t n = N == 0 ? cfg.N_ladder.front() : N;
  with_model(cfg, [&](const auto& model) {
    auto lopt = limit_options_from(cfg, c.threads);
    lopt.min_ref = 1;
    lopt.need_aux = false;
    const auto setup = build_limit_setup(model, grid, cfg.initial_law(), direction_from(cfg), lopt);
    std::filesystem::create_directories(cfg.out_dir);
    const auto path = std::filesystem::path(cfg.out_dir) / ("paths_N" + std::to_string(n) + ".csv");
    dump_paths(model, cfg, setup, n, path);
    std::cout << "wrote " << path.string() << '\n';
    return 0;
  });
  return 0;
}

int cmd_rates(const Common& c) {
  const auto cfg = load(c);
  const auto res = run_experiment(cfg, c.threads, true);
  std::cout << "quantity     slope      ci_low     ci_high    reference  verdict\n";
  for (const auto& r : res.reports) {
    std::cout << r.quantity << std::string(13 - std::min<std::size_t>(12, r.quantity.size()), ' ');
    if (r.fit)
      std::cout << fmt(r.fit->slope, "%-10.4f ") << fmt(r.fit->ci_low, "%-10.4f ") << fmt(r.fit->ci_high, "%-10.4f ");
    else
      std::cout << "-          -          -          ";
    std::cout << (r.reference_slopes.empty() ? std::string("-         ") : fmt(r.reference_slopes.front(), "%-10.4f"))
              << ' ' << r.verdict << '\n';
  }
  std::cout << "outputs in " << cfg.out_dir << '\n';
  return 0;
}

int cmd_bismut(const Common& c, std::size_t N, std::size_t reps) {
  const auto cfg = load(c);
  const TimeGrid grid(cfg.T, cfg.n_steps);
  const auto tf = test_function(cfg.test_function);
  BismutRun run;
  run.grid = grid;
  run.init = cfg.initial_law();
  run.phi = direction_from(cfg);
  run.N = N == 0 ? cfg.N_ladder.back() : N;
  run.replications = reps == 0 ? cfg.replications : reps;
  run.seed = cfg.seed;
  run.threads = c.threads;
  std::vector<IntrinsicDerivEstimate> rows;
  std::vector<std::string> labels;
  with_model(cfg, [&](const auto& model) {
    const auto weight = weight_from(cfg, grid);
    const auto lopt = limit_options_from(cfg, c.threads);
    const auto setup = build_limit_setup(model, grid, run.init, run.phi, lopt);
    rows.push_back(estimate_bsmn_particle(model, tf, weight, run));
    labels.push_back("bsmn_particle");
    rows.push_back(estimate_zeta_limit(model, tf, weight, run, setup));
    labels.push_back("zeta_limit");
    rows.push_back(finite_difference_intrinsic(model, tf, cfg.fd_epsilon, Which::kParticle, run));
    labels.push_back("fd_particle");
    rows.push_back(finite_difference_intrinsic(model, tf, cfg.fd_epsilon, Which::kLimit, run, lopt));
    labels.push_back("fd_limit");
    rows.push_back(pathwise_grad(model, tf, Which::kParticle, run));
    labels.push_back("pathwise_particle");
    rows.push_back(pathwise_grad(model, tf, Which::kLimit, run, &setup));
    labels.push_back("pathwise_limit");
    return 0;
  });
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream csv(std::filesystem::path(cfg.out_dir) / "bismut.csv");
  csv << "estimator,N,replications,value,std_error\n";
  std::cout << "f = " << tf.id << ", N = " << run.N << ", replications = " << run.replications << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::cout << labels[i] << std::string(20 - labels[i].size(), ' ') << fmt(rows[i].value, "%12.6f") << "  +- "
              << fmt(rows[i].std_error, "%.6f") << '\n';
    csv << labels[i] << ',' << run.N << ',' << run.replications << ',' << fmt(rows[i].value, "%.17g") << ','
        << fmt(rows[i].std_error, "%.17g") << '\n';
  }
  return 0;
}

int cmd_validate(const Common& c, std::size_t samples) {
  const auto cfg = load(c);
  const auto init = cfg.initial_law();
  int failures = 0;
  with_model(cfg, [&](const auto& model) {
    const auto d = model.dim();
    auto pts = sample_initial(init, derive_seed(cfg.seed, 11), samples + 16, d);
    const EmpiricalMeasure mu(std::vector<double>(pts.begin() + d * 8, pts.begin() + d * 16), d);
    auto nu_pts = sample_initial(init, derive_seed(cfg.seed, 12), 8, d);
    for (auto& v : nu_pts) v *= 0.5;
    const EmpiricalMeasure nu(nu_pts, d);
    double grad_gap = 0.0, lions_gap = 0.0, slack = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < samples; ++s) {
      const std::span<const double> x(pts.data() + (16 + s) * d, static_cast<std::size_t>(d));
      const std::span<const double> y(pts.data() + ((s + 1) % samples) * d, static_cast<std::size_t>(d));
      const double t = cfg.T * static_cast<double>(s) / static_cast<double>(samples);
      grad_gap = std::max(grad_gap, check_drift_grad(model, t, x, mu, 1e-5));
      lions_gap = std::max(lions_gap, check_lions_kernel(model, t, x, mu, mu.point(s % mu.size()), 1e-5));
      slack = std::max(slack, one_sided_bound_slack(model, t, x, y, mu, nu));
    }
    const auto adm = model.admissibility();
    std::cout << "model " << model.id() << '\n';
    std::cout << "  drift gradient FD gap    " << fmt(grad_gap) << (grad_gap <= 1e-6 ? "  ok" : "  FAIL") << '\n';
    std::cout << "  Lions kernel FD gap      " << fmt(lions_gap) << (lions_gap <= 1e-6 ? "  ok" : "  FAIL") << '\n';
    std::cout << "  one-sided bound slack    " << fmt(slack) << (slack <= 0.0 ? "  ok" : "  violated") << '\n';
    if (!adm.note.empty()) std::cout << "  note: " << adm.note << '\n';
    failures += (grad_gap > 1e-6) + (lions_gap > 1e-6) + (slack > 0.0);
    return 0;
  });
  return failures == 0 ? 0 : 1;
}

int cmd_theory(const Common& c, double alpha, double m) {
  const auto cfg = load(c);
  const double q = cfg.moment_q();
  const double expo = theoretical_exponent(alpha, q, cfg.k, m);
  std::cout << "k = " << cfg.k << ", d = " << cfg.d << ", q = " << q << ", alpha = " << alpha << ", m = " << m
            << ", exponent = " << fmt(expo) << '\n';
  std::cout << "N          eps(N)       eps(N)^exponent\n";
  for (std::size_t N : cfg.N_ladder) {
    const double e = epsilon_rate(static_cast<double>(N), cfg.k, cfg.d, q);
    std::cout << fmt(static_cast<double>(N), "%-10.0f ") << fmt(e, "%-12.6g ") << fmt(std::pow(e, expo), "%.6g")
              << '\n';
  }
  if (cfg.N_ladder.size() >= 2)
    std::cout << "ladder slope of eps(N)^exponent: "
              << fmt(theory_slope(static_cast<double>(cfg.N_ladder.front()), static_cast<double>(cfg.N_ladder.back()),
                                  cfg.k, cfg.d, q, expo))
              << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mean-field particle systems: propagation of chaos and derivative flows"};
  app.require_subcommand(1);

  Common sim_c, rates_c, bis_c, val_c, th_c;
  std::size_t sim_N = 0, bis_N = 0, bis_reps = 0, val_samples = 64;
  double alpha = 1.0, growth_m = 0.0;

  auto* sim = app.add_subcommand("simulate", "simulate one (N, seed) replication and dump its paths");
  add_common(sim, sim_c, false);
  sim->add_option("--N", sim_N, "particle count (default: first ladder entry)");

  auto* rates = app.add_subcommand("rates", "run the N-ladder and write rates.csv and report.json");
  add_common(rates, rates_c, false);

  auto* bis = app.add_subcommand("bismut", "compare intrinsic-derivative estimators");
  add_common(bis, bis_c, false);
  bis->add_option("--N", bis_N, "particle count (default: last ladder entry)");
  bis->add_option("--replications", bis_reps, "replications (default: ladder.replications)");

  auto* val = app.add_subcommand("validate", "model self-checks: gradients, Lions kernel, one-sided bound");
  add_common(val, val_c, false);
  val->add_option("--samples", val_samples, "sample points")->check(CLI::Range(2, 100000));

  auto* th = app.add_subcommand("theory", "print eps(N) and exponent tables");
  add_common(th, th_c, false);
  th->add_option("--alpha", alpha, "Holder exponent alpha in (0, 1]");
  th->add_option("--m", growth_m, "growth exponent m >= 0");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*sim) return cmd_simulate(sim_c, sim_N);
    if (*rates) return cmd_rates(rates_c);
    if (*bis) return cmd_bismut(bis_c, bis_N, bis_reps);
    if (*val) return cmd_validate(val_c, val_samples);
    if (*th) return cmd_theory(th_c, alpha, growth_m);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
