#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "mfchaos/fit.hpp"
#include "mfchaos/particle_sim.hpp"

using namespace mfchaos;

namespace {

// b = c_drift, sigma = c_sigma, no measure dependence
ModelSpec constant_model(double c_drift, double c_sigma) {
  ModelFunctions f;
  f.id = "constant";
  f.features = [](std::span<const double>, std::span<double> out) {
    out[0] = 0.0;
    out[1] = 0.0;
  };
  f.jet = [=](double, std::span<const double>, std::span<const double>, Jet& j) {
    j.drift[0] = c_drift;
    j.drift_dx[0] = 0.0;
    j.drift_dpsi[0] = 0.0;
    j.diffusion[0] = c_sigma;
  };
  return make_model(f);
}

FrozenLaw law_from_rows(const std::vector<std::vector<double>>& rows, const TimeGrid& grid) {
  FrozenLaw law;
  law.d = 1;
  law.p = 1;
  law.M = rows.front().size();
  law.grid = grid;
  for (const auto& r : rows) {
    double s = 0.0;
    for (double v : r) s += v;
    law.features.push_back(s / static_cast<double>(r.size()));
    law.positions.insert(law.positions.end(), r.begin(), r.end());
  }
  return law;
}

}  // namespace

TEST(StepParticles, ZeroCoefficientsLeavePositionsUnchanged) {
  const TimeGrid grid(1.0, 10);
  const auto bank = make_noise_bank(1, 3, grid, 1);
  ParticleCloud c{1, 0, {0.5, -1.0, 2.0}};
  const auto next = step_particles(constant_model(0.0, 0.0), c, bank, grid);
  EXPECT_EQ(next.x, c.x);
  EXPECT_EQ(next.node, 1);
}

TEST(StepParticles, DeterministicEulerStep) {
  const TimeGrid grid(1.0, 100);
  const auto bank = make_noise_bank(1, 1, grid, 1);
  const auto next = step_particles(constant_model(1.0, 0.0), ParticleCloud{1, 0, {0.0}}, bank, grid);
  EXPECT_DOUBLE_EQ(next.x[0], 0.01);
  const MfOu ou{-1.0, 0.5, 0.0, 1};
  const auto all_one = step_particles(ou, ParticleCloud{1, 0, {1.0, 1.0, 1.0}}, make_noise_bank(1, 3, grid, 1), grid);
  for (double v : all_one.x) EXPECT_DOUBLE_EQ(v, 1.0 + (-1.0 + 0.5) * 0.01);
}

TEST(StepParticles, UsesPreStepMeasure) {
  const TimeGrid grid(1.0, 10);
  const MfOu ou{0.0, 1.0, 0.0, 1};
  const auto next = step_particles(ou, ParticleCloud{1, 0, {0.0, 2.0}}, make_noise_bank(1, 2, grid, 1), grid);
  EXPECT_DOUBLE_EQ(next.x[0], 0.1);
  EXPECT_DOUBLE_EQ(next.x[1], 2.1);
}

TEST(StepParticles, Errors) {
  const TimeGrid grid(1.0, 2);
  const auto ou = make_mf_ou_model(-1.0, 0.5, 0.3);
  const auto bank = make_noise_bank(1, 2, grid, 1);
  EXPECT_THROW(step_particles(ou, ParticleCloud{1, 2, {0.0, 0.0}}, bank, grid), ParameterError);
  EXPECT_THROW(step_particles(ou, ParticleCloud{1, 0, {0.0, 0.0, 0.0}}, bank, grid), DimensionError);
  EXPECT_THROW(step_particles(make_mf_ou_model(-1.0, 0.5, 0.3, 2), ParticleCloud{1, 0, {0.0, 0.0}}, bank, grid),
               DimensionError);
}

TEST(StepParticles, DivergenceIsReported) {
  const TimeGrid grid(10.0, 10);
  const auto dw = make_double_well_model(1.0, 0.0, 0.5);
  ParticleCloud c{1, 0, {0.1, 5.0}};
  const auto bank = make_noise_bank(1, 2, grid, 1);
  try {
    for (int n = 0; n < grid.n_steps; ++n) c = step_particles(dw, std::move(c), bank, grid);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("particle 1"), std::string::npos);
  }
}

TEST(InitialLaw, MomentsAndErrors) {
  EXPECT_THROW(InitialLaw::uniform(1.0, 1.0), ParameterError);
  EXPECT_THROW(InitialLaw::normal(0.0, 0.0), ParameterError);
  EXPECT_THROW(InitialLaw::student_t(0.0, 1.0), ParameterError);
  const auto u = InitialLaw::uniform(-1.0, 1.0);
  EXPECT_DOUBLE_EQ(u.variance(), 1.0 / 3.0);
  EXPECT_TRUE(std::isinf(u.moment_order()));
  EXPECT_DOUBLE_EQ(InitialLaw::student_t(5.0, 1.0).moment_order(), 5.0);
  const auto xs = sample_initial(u, 4, 200000, 1);
  double m = 0.0, v = 0.0;
  for (double x : xs) {
    ASSERT_GE(x, -1.0);
    ASSERT_LE(x, 1.0);
    m += x;
    v += x * x;
  }
  m /= 200000.0;
  EXPECT_LT(std::abs(m), 4.0 * std::sqrt(1.0 / 3.0 / 200000.0));
  EXPECT_NEAR(v / 200000.0, 1.0 / 3.0, 0.01);
  const auto t = sample_initial(InitialLaw::student_t(5.0, 0.5), 4, 200000, 1);
  double tv = 0.0;
  for (double x : t) tv += x * x;
  EXPECT_NEAR(tv / 200000.0, 0.25 * 5.0 / 3.0, 0.05);
}

TEST(InitialLaw, PrefixStable) {
  const auto law = InitialLaw::normal(0.0, 1.0);
  const auto a = sample_initial(law, 9, 64, 3), b = sample_initial(law, 9, 128, 3);
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(RunReference, ZeroMeanDynamics) {
  const TimeGrid grid(1.0, 200);
  const auto ou = make_mf_ou_model(-1.0, 0.5, 0.3);
  const auto bank = make_noise_bank(2, 4096, grid, 1);
  const auto law = run_reference(ou, 4096, bank, grid, InitialLaw::point(0.0));
  for (int n : {0, 50, 200}) {
    const auto pts = law.positions_at(n);
    double m = 0.0, v = 0.0;
    for (double x : pts) m += x;
    m /= 4096.0;
    for (double x : pts) v += (x - m) * (x - m);
    const double se = std::sqrt(v / 4095.0 / 4096.0);
    EXPECT_LE(std::abs(m), 3.0 * se + 1e-15);
    EXPECT_NEAR(law.features_at(n)[0], m, 1e-15);
  }
}

TEST(RunReference, DeterministicDecay) {
  const TimeGrid grid(1.0, 1000);
  const MfOu ou{-1.0, 0.0, 0.0, 1};
  const auto law = run_reference(ou, 16, make_noise_bank(3, 16, grid, 1), grid, InitialLaw::point(1.0));
  for (double x : law.positions_at(1000)) EXPECT_NEAR(x, std::exp(-1.0), 2.0 * grid.dt());
}

TEST(RunReference, OuVarianceAtUnitTime) {
  const TimeGrid grid(1.0, 1000);
  const auto ou = make_mf_ou_model(-1.0, 0.0, 0.3);
  EXPECT_NEAR(ou_variance(ou, InitialLaw::point(0.0), 1.0), 0.03891, 5e-6);
  const std::size_t M = 8192;
  const auto law = run_reference(ou, M, make_noise_bank(4, M, grid, 1), grid, InitialLaw::point(0.0));
  const auto pts = law.positions_at(1000);
  double m = 0.0;
  for (double x : pts) m += x;
  m /= static_cast<double>(M);
  double v = 0.0, m4 = 0.0;
  for (double x : pts) {
    v += (x - m) * (x - m);
    m4 += std::pow(x - m, 4);
  }
  v /= static_cast<double>(M - 1);
  m4 /= static_cast<double>(M);
  const double se = std::sqrt((m4 - v * v) / static_cast<double>(M));
  EXPECT_LE(std::abs(v - 0.03891), 3.0 * se + 2.0 * grid.dt());
}

TEST(RunReference, FloorEnforced) {
  const TimeGrid grid(1.0, 10);
  ReferenceOptions opt;
  opt.min_size = 100;
  EXPECT_THROW(run_reference(make_mf_ou_model(-1, 0.5, 0.3), 50, make_noise_bank(1, 50, grid, 1), grid,
                             InitialLaw::point(0.0), opt),
               ParameterError);
}

TEST(StepLimitCopies, ZeroCoefficientsAndErrors) {
  const TimeGrid grid(1.0, 4);
  const auto model = constant_model(0.0, 0.0);
  auto law = std::make_shared<FrozenLaw>(law_from_rows({{0.0}, {0.0}, {0.0}, {0.0}, {0.0}}, grid));
  law->p = 2;
  law->features.assign(10, 0.0);
  LimitCloud lc{ParticleCloud{1, 0, {1.0, -2.0}}, law};
  const auto next = step_limit_copies(model, lc, make_noise_bank(1, 2, grid, 1), grid);
  EXPECT_EQ(next.copies.x, lc.copies.x);
  LimitCloud none{ParticleCloud{1, 0, {1.0}}, nullptr};
  EXPECT_THROW(step_limit_copies(model, none, make_noise_bank(1, 1, grid, 1), grid), ConfigError);
}

TEST(StepLimitCopies, DecoupledModelMatchesParticlesBitExactly) {
  const TimeGrid grid(1.0, 300);
  const auto ou = make_mf_ou_model(-1.0, 0.0, 0.3);
  const std::size_t N = 64;
  const auto bank = make_noise_bank(5, N, grid, 1);
  auto law = std::make_shared<const FrozenLaw>(
      run_reference(ou, 512, make_noise_bank(6, 512, grid, 1), grid, InitialLaw::uniform(-1.0, 1.0)));
  const auto x0 = sample_initial(InitialLaw::uniform(-1.0, 1.0), 7, N, 1);
  ParticleCloud pc{1, 0, x0};
  LimitCloud lc{ParticleCloud{1, 0, x0}, law};
  for (int n = 0; n < grid.n_steps; ++n) {
    pc = step_particles(ou, std::move(pc), bank, grid);
    lc = step_limit_copies(ou, std::move(lc), bank, grid);
    ASSERT_EQ(pc.x, lc.copies.x) << "node " << n + 1;
  }
}

TEST(StepLimitCopies, DecoupledCopiesTrackExponentialIntegrator) {
  // Euler vs the exponential integrator x e^{a dt} + sigma dW at matched noise: O(dt) apart
  const auto ou = make_mf_ou_model(-1.0, 0.0, 0.3);
  auto worst_gap = [&](int steps) {
    const TimeGrid grid(1.0, steps);
    const std::size_t N = 32;
    const auto bank = make_noise_bank(8, N, grid, 1);
    auto law = std::make_shared<const FrozenLaw>(ou_limit_law(ou, InitialLaw::point(0.5), grid, 256, 1, false));
    LimitCloud lc{ParticleCloud{1, 0, std::vector<double>(N, 0.5)}, law};
    std::vector<double> ex(N, 0.5);
    double worst = 0.0;
    for (int n = 0; n < steps; ++n) {
      lc = step_limit_copies(ou, std::move(lc), bank, grid);
      for (std::size_t i = 0; i < N; ++i) {
        ex[i] = ex[i] * std::exp(-grid.dt()) + 0.3 * bank.increment(i, n)[0];
        worst = std::max(worst, std::abs(ex[i] - lc.copies.x[i]));
      }
    }
    return worst;
  };
  const double g1 = worst_gap(100), g2 = worst_gap(1000);
  EXPECT_LT(g1, 0.01);
  EXPECT_LT(g2, 0.001);
}

TEST(CollectPathStats, IdenticalCloudsGiveZero) {
  const TimeGrid grid(1.0, 1);
  auto law = std::make_shared<const FrozenLaw>(law_from_rows({{0.0, 2.0}, {0.0, 2.0}}, grid));
  PathStats st;
  MetricsConfig cfg;
  collect_path_stats(ParticleCloud{1, 1, {0.0, 2.0}}, LimitCloud{ParticleCloud{1, 1, {0.0, 2.0}}, law}, cfg, st);
  EXPECT_EQ(st.max_sup_gap(), 0.0);
  EXPECT_EQ(st.wk[1], 0.0);
}

TEST(CollectPathStats, WassersteinContribution) {
  const TimeGrid grid(1.0, 1);
  auto law = std::make_shared<const FrozenLaw>(law_from_rows({{1.0, 3.0}, {1.0, 3.0}}, grid));
  PathStats st;
  MetricsConfig cfg;
  collect_path_stats(ParticleCloud{1, 1, {0.0, 2.0}}, LimitCloud{ParticleCloud{1, 1, {1.0, 3.0}}, law}, cfg, st);
  EXPECT_DOUBLE_EQ(st.wk[1], 1.0);
  EXPECT_DOUBLE_EQ(st.sup_gap[0], 1.0);
}

TEST(CollectPathStats, SupGapIsRunningMax) {
  const TimeGrid grid(1.0, 3);
  auto law = std::make_shared<const FrozenLaw>(law_from_rows({{0.0}, {0.0}, {0.0}, {0.0}}, grid));
  PathStats st;
  MetricsConfig cfg;
  cfg.wasserstein = false;
  const double gaps[] = {0.5, 2.0, 1.0, 3.0};
  double prev = 0.0;
  for (int n = 0; n < 4; ++n) {
    collect_path_stats(ParticleCloud{1, n, {gaps[n]}}, LimitCloud{ParticleCloud{1, n, {0.0}}, law}, cfg, st);
    EXPECT_GE(st.sup_gap[0], prev);
    prev = st.sup_gap[0];
  }
  EXPECT_EQ(prev, 3.0);
  EXPECT_THROW(collect_path_stats(ParticleCloud{1, 0, {0.0}}, LimitCloud{ParticleCloud{1, 1, {0.0}}, law}, cfg, st),
               ParameterError);
}

TEST(ParticleProperties, SecondMomentStableAcrossN) {
  const TimeGrid grid(1.0, 200);
  const auto ou = make_mf_ou_model(-1.0, 0.5, 0.3);
  const auto init = InitialLaw::uniform(-1.0, 1.0);
  // sup_t E|X_t|^2 of the limit is attained at t = 0 here
  double bound = 0.0;
  for (int n = 0; n <= 200; ++n) {
    const double t = grid.t(n);
    bound = std::max(bound, ou_variance(ou, init, t) + std::pow(ou_mean(ou, init, t), 2));
  }
  for (std::size_t N : {64, 256, 1024, 4096}) {
    const auto bank = make_noise_bank(11, N, grid, 1);
    ParticleCloud pc{1, 0, sample_initial(init, 12, N, 1)};
    std::vector<double> sup(N, 0.0);
    for (int n = 0;; ++n) {
      for (std::size_t i = 0; i < N; ++i) sup[i] = std::max(sup[i], pc.x[i] * pc.x[i]);
      if (n == grid.n_steps) break;
      pc = step_particles(ou, std::move(pc), bank, grid);
    }
    double m = 0.0;
    for (double s : sup) m += s;
    EXPECT_LT(m / static_cast<double>(N), 1.5 * bound) << "N = " << N;
  }
}

TEST(ParticleProperties, EulerStrongConvergence) {
  // reference: the same Brownian paths refined to dt = 2^-13
  const auto ou = make_mf_ou_model(-1.0, 0.5, 0.3);
  const std::size_t N = 64;
  const auto x0 = sample_initial(InitialLaw::uniform(-1.0, 1.0), 3, N, 1);
  std::vector<NoiseBank> banks{make_noise_bank(21, N, 16, 1.0 / 16.0, 1)};
  for (int l = 0; l < 9; ++l) banks.push_back(refine_bank(banks.back()));
  auto terminal = [&](const NoiseBank& b) {
    const TimeGrid grid(1.0, b.n_steps());
    ParticleCloud pc{1, 0, x0};
    for (int n = 0; n < grid.n_steps; ++n) pc = step_particles(ou, std::move(pc), b, grid);
    return pc.x;
  };
  const auto ref = terminal(banks.back());
  std::vector<FitPoint> pts;
  for (int l = 0; l <= 5; ++l) {
    const auto x = terminal(banks[static_cast<std::size_t>(l)]);
    double e = 0.0;
    for (std::size_t i = 0; i < N; ++i) e += (x[i] - ref[i]) * (x[i] - ref[i]);
    pts.push_back({static_cast<double>(16 << l), std::sqrt(e / static_cast<double>(N)), 0.0});
  }
  // error against n_steps: slope <= -0.45 means order >= 0.45 in dt
  EXPECT_LE(fit_rate(pts).slope, -0.45);
}

TEST(ParticleProperties, KuramotoGapDecreasesWithN) {
  const TimeGrid grid(1.0, 200);
  const auto km = make_kuramoto_model(1.0, 0.5);
  const auto init = InitialLaw::uniform(-1.0, 1.0);
  const std::size_t M = 8192;
  auto law = std::make_shared<const FrozenLaw>(
      run_reference(km, M, make_noise_bank(31, M, grid, 1), grid, init, ReferenceOptions{1, false, 32}));
  std::vector<MomentEstimate> est;
  for (std::size_t N : {32, 128, 512}) {
    std::vector<double> vals;
    for (std::uint64_t r = 0; r < 16; ++r) {
      const auto bank = make_noise_bank(100 + r, N, grid, 1);
      const auto x0 = sample_initial(init, 200 + r, N, 1);
      ParticleCloud pc{1, 0, x0};
      LimitCloud lc{ParticleCloud{1, 0, x0}, law};
      PathStats st;
      MetricsConfig cfg;
      cfg.wasserstein = false;
      for (int n = 0;; ++n) {
        collect_path_stats(pc, lc, cfg, st);
        if (n == grid.n_steps) break;
        pc = step_particles(km, std::move(pc), bank, grid);
        lc = step_limit_copies(km, std::move(lc), bank, grid);
      }
      double s = 0.0;
      for (double g : st.sup_gap) s += g * g;
      vals.push_back(s / static_cast<double>(N));
    }
    est.push_back(mean_estimate(vals, 2.0));
  }
  for (std::size_t i = 1; i < est.size(); ++i)
    EXPECT_LT(est[i].value, est[i - 1].value + est[i].std_error + est[i - 1].std_error);
}

TEST(OuLimitLaw, MatchesClosedFormMoments) {
  const TimeGrid grid(1.0, 10);
  const auto ou = make_mf_ou_model(-1.0, 0.5, 0.3);
  const auto init = InitialLaw::uniform(-1.0, 1.0);
  const std::size_t M = 50000;
  const auto law = ou_limit_law(ou, init, grid, M, 3);
  const auto pts = law.positions_at(10);
  double m = 0.0, v = 0.0;
  for (double x : pts) m += x;
  m /= static_cast<double>(M);
  for (double x : pts) v += (x - m) * (x - m);
  v /= static_cast<double>(M - 1);
  const double var = ou_variance(ou, init, 1.0);
  EXPECT_LT(std::abs(m - ou_mean(ou, init, 1.0)), 4.0 * std::sqrt(var / static_cast<double>(M)));
  EXPECT_NEAR(v, var, 4.0 * var * std::sqrt(2.0 / static_cast<double>(M)));
}

TEST(SeededSubsample, DistinctIndicesAndErrors) {
  const auto idx = seeded_subsample(100, 40, 9);
  std::vector<bool> seen(100, false);
  for (auto i : idx) {
    ASSERT_LT(i, 100u);
    EXPECT_FALSE(seen[i]);
    seen[i] = true;
  }
  EXPECT_EQ(idx, seeded_subsample(100, 40, 9));
  EXPECT_THROW(seeded_subsample(10, 11, 0), ParameterError);
}
