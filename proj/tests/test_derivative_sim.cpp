#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "mfchaos/derivative_sim.hpp"

using namespace mfchaos;

namespace {

struct Fixture {
  TimeGrid grid;
  LimitSetup setup;
  WeightFunction weight;
};

template <class M>
Fixture make_fixture(const M& model, int steps, const DirectionSpec& phi, std::size_t M_ref, bool analytic,
                     double r = 0.0) {
  Fixture f{TimeGrid(1.0, steps), {}, {}};
  LimitSetupOptions opt;
  opt.M_ref = opt.M_aux = M_ref;
  opt.seed = 77;
  opt.prefer_analytic = analytic;
  f.setup = build_limit_setup(model, f.grid, InitialLaw::uniform(-1.0, 1.0), phi, opt);
  f.weight = WeightFunction::linear(f.grid, r);
  return f;
}

template <class M>
CoupledResult coupled(const M& model, const Fixture& f, std::size_t N, const DirectionSpec& phi, std::uint64_t rep,
                      CoupledOptions opt = {}) {
  const auto bank = make_noise_bank(replication_bank_seed(5, rep), N, f.grid, model.noise_dim());
  CoupledInputs in{f.setup.law, f.setup.aux.get(), &f.weight, phi,
                   sample_initial(InitialLaw::uniform(-1.0, 1.0), replication_init_seed(5, rep), N, model.dim())};
  opt.metrics.wasserstein = false;
  return run_coupled(model, f.grid, bank, N, in, opt);
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace

TEST(DirectionSpec, ValuesAndGrowth) {
  std::vector<double> out(2);
  const std::vector<double> x{0.5, -2.0};
  DirectionSpec::linear(2.0, 1.0).apply(x, out);
  EXPECT_EQ(out[0], 2.0);
  EXPECT_EQ(out[1], -3.0);
  DirectionSpec::tanh(3.0).apply(x, out);
  EXPECT_DOUBLE_EQ(out[0], 3.0 * std::tanh(0.5));
  EXPECT_DOUBLE_EQ(DirectionSpec::linear(2.0, 1.0).mean_under(InitialLaw::uniform(0.0, 2.0)), 3.0);
  EXPECT_THROW(DirectionSpec::tanh().mean_under(InitialLaw::uniform(0.0, 2.0)), UnsupportedModelError);
  EXPECT_THROW(DirectionSpec::custom({}, "empty"), ParameterError);
  const std::vector<double> pts{0.0, 1.0, 100.0};
  EXPECT_DOUBLE_EQ(direction_growth_ratio(DirectionSpec::linear(2.0, 1.0), pts, 1), 201.0 / 101.0);
  EXPECT_LE(direction_growth_ratio(DirectionSpec::tanh(), pts, 1), 1.0);
}

TEST(WeightFunction, EndpointsAndDerivative) {
  const TimeGrid grid(2.0, 400);
  for (double r : {0.0, 0.5}) {
    for (const auto& w : {WeightFunction::linear(grid, r), WeightFunction::sin2(grid, r)}) {
      EXPECT_EQ(w.g.back(), 1.0);
      for (int n = 0; n < grid.nodes(); ++n) {
        if (grid.t(n) < r) {
          EXPECT_EQ(w.g[static_cast<std::size_t>(n)], 0.0);
          EXPECT_EQ(w.dg[static_cast<std::size_t>(n)], 0.0);
          EXPECT_FALSE(w.active(n));
        }
      }
      const int n0 = static_cast<int>(std::lround(r / grid.dt()));
      EXPECT_NEAR(w.g[static_cast<std::size_t>(n0)], 0.0, 1e-12);
      for (int n = n0 + 1; n + 1 < grid.nodes(); ++n) {
        const double fd = (w.g[static_cast<std::size_t>(n + 1)] - w.g[static_cast<std::size_t>(n - 1)]) / (2.0 * grid.dt());
        ASSERT_NEAR(fd, w.dg[static_cast<std::size_t>(n)], 1e-4);
      }
    }
  }
  EXPECT_THROW(WeightFunction::linear(grid, 2.0), ParameterError);
  EXPECT_THROW(WeightFunction::linear(grid, -0.1), ParameterError);
}

TEST(DirectionalFlow, ZeroFieldGivesZeroFlows) {
  const auto km = make_kuramoto_model(1.0, 0.5);
  const auto phi = DirectionSpec::zero();
  const auto f = make_fixture(km, 50, phi, 256, false);
  const auto res = coupled(km, f, 16, phi, 0, CoupledOptions{true, true, true, true, 4, {}, 25, 2.0});
  for (const auto* v : {&res.v_T, &res.u_T, &res.own_T, &res.cross_T, &res.wlim_T, &res.hhat_T, &res.bismut_particle,
                        &res.bismut_limit})
    EXPECT_EQ(max_abs(*v), 0.0);
  EXPECT_EQ(res.zeta_moment, 0.0);
}

TEST(DirectionalFlow, OuConstantFieldDecaysAtCombinedRate) {
  const auto ou = make_mf_ou_model(-1.0, 0.5, 0.3);
  const auto phi = DirectionSpec::constant(1.0);
  const auto f = make_fixture(ou, 1000, phi, 256, true);
  ASSERT_TRUE(f.setup.analytic_aux);
  const auto res = coupled(ou, f, 32, phi, 0, CoupledOptions{true, true, false, false, 1, {}, -1, 2.0});
  for (std::size_t i = 0; i < 32; ++i) {
    EXPECT_NEAR(res.v_T[i], std::exp(-0.5), f.grid.dt());
    EXPECT_NEAR(res.u_T[i], std::exp(-0.5), f.grid.dt());
    EXPECT_NEAR(res.v_T[i], std::pow(1.0 - 0.5 * f.grid.dt(), 1000), 1e-12);
  }
}

TEST(Auxiliary, SimulatedPairingMatchesClosedForm) {
  const auto ou = make_mf_ou_model(-1.0, 0.5, 0.3);
  const TimeGrid grid(1.0, 200);
  const auto init = InitialLaw::uniform(-1.0, 1.0);
  const auto phi = DirectionSpec::linear(1.0, 0.5);
  const std::size_t M = 20000;
  const auto sim = run_auxiliary(ou, M, make_noise_bank(3, M, grid, 1), grid, init, phi, 4);
  const auto exact = ou_auxiliary_law(ou, init, phi, grid);
  const double se = std::sqrt(1.0 / 3.0 / static_cast<double>(M));
  for (int n : {0, 100, 200}) {
    EXPECT_NEAR(sim.pairing_at(n)[0], exact.pairing_at(n)[0], 4.0 * se + 2.0 * grid.dt());
    EXPECT_NEAR(sim.mean_v[static_cast<std::size_t>(n)], exact.mean_v[static_cast<std::size_t>(n)],
                4.0 * se + 2.0 * grid.dt());
  }
  EXPECT_NEAR(exact.pairing_at(200)[0], 0.5 * std::exp(-0.5), 1e-15);
}

TEST(MalliavinDirection, OuValuesAndInactiveWindow) {
  const auto ou = make_mf_ou_model(-1.0, 0.5, 0.25);
  const TimeGrid grid(1.0, 10);
  const auto w = WeightFunction::linear(grid, 0.5);
  const std::vector<double> xs{0.1, 0.2}, v{2.0, -1.0};
  EXPECT_EQ(max_abs(build_malliavin_direction(ou, w, 4, xs, v)), 0.0);
  const auto h = build_malliavin_direction(ou, w, 5, xs, v);
  EXPECT_DOUBLE_EQ(h[0], 2.0 * 2.0 / 0.25);
  EXPECT_DOUBLE_EQ(h[1], 2.0 * -1.0 / 0.25);
}

TEST(MalliavinFlow, InactiveWindowLeavesFlowsUnchanged) {
  const auto km = make_kuramoto_model(1.0, 0.5);
  const TimeGrid grid(1.0, 10);
  const auto w = WeightFunction::linear(grid, 0.5);
  const auto bank = make_noise_bank(1, 4, grid, 1);
  const ParticleCloud pc{1, 2, {0.1, 0.5, -0.3, 1.0}};
  const std::vector<double> v{1.0, 1.0, 1.0, 1.0}, zero(4, 0.0), w0{0.3, 0.0, -0.2, 0.1};
  EXPECT_EQ(step_malliavin_component(km, pc, v, zero, source_all(), w, bank, grid), zero);
  EXPECT_EQ(step_malliavin_component(km, pc, v, w0, source_only(1), w, bank, grid), w0);
  const auto active = step_malliavin_component(km, ParticleCloud{1, 6, pc.x}, v, zero, source_only(1), w, bank, grid);
  EXPECT_EQ(active[0], 0.0);
  EXPECT_DOUBLE_EQ(active[1], w.dg[6] * grid.dt());
}

TEST(MalliavinFlow, CrossComponentIsOrderOneOverN) {
  // constant field on mf_ou: every flow is deterministic and N w^{(l)}_k does not depend on N
  const auto ou = make_mf_ou_model(-1.0, 0.5, 0.3);
  const TimeGrid grid(1.0, 500);
  const auto w = WeightFunction::linear(grid, 0.0);
  std::vector<double> scaled;
  for (std::size_t N : {8, 32, 128}) {
    const auto bank = make_noise_bank(2, N, grid, 1);
    ParticleCloud pc{1, 0, sample_initial(InitialLaw::uniform(-1.0, 1.0), 3, N, 1)};
    std::vector<double> v(N, 1.0), wl(N, 0.0);
    for (int n = 0; n < grid.n_steps; ++n) {
      auto wn = step_malliavin_component(ou, pc, v, wl, source_only(0), w, bank, grid);
      auto vn = step_directional_particle(ou, pc, v, bank, grid);
      pc = step_particles(ou, std::move(pc), bank, grid);
      wl = std::move(wn);
      v = std::move(vn);
    }
    scaled.push_back(static_cast<double>(N) * wl[1]);
  }
  // 0.5 e^{-1} (4 - 2 e^{1/2})
  const double exact = 0.5 * std::exp(-1.0) * (4.0 - 2.0 * std::exp(0.5));
  for (double s : scaled) EXPECT_NEAR(s, exact, 5.0 * grid.dt());
  EXPECT_NEAR(scaled[0], scaled[2], 1e-10);
}

TEST(LieDerivative, ParticleAndLimitIdentitiesHoldToFirstOrder) {
  for (int which = 0; which < 2; ++which) {
    const auto phi = DirectionSpec::linear(1.0, 0.5);
    auto gaps = [&](const auto& model, int steps) {
      const auto f = make_fixture(model, steps, phi, 1024, false);
      const auto res = coupled(model, f, 32, phi, 1, CoupledOptions{true, true, true, false, 4, {}, -1, 2.0});
      return std::pair{res.ld_particle, res.ld_limit};
    };
    std::pair<double, double> coarse, fine;
    if (which == 0) {
      const auto ou = make_mf_ou_model(-1.0, 0.5, 0.3);
      coarse = gaps(ou, 100);
      fine = gaps(ou, 400);
    } else {
      const auto km = make_kuramoto_model(1.0, 0.5);
      coarse = gaps(km, 100);
      fine = gaps(km, 400);
    }
    EXPECT_LT(coarse.first, 0.2) << which;
    EXPECT_LT(coarse.second, 0.2) << which;
    EXPECT_LT(fine.first, coarse.first / 2.0) << which;
    EXPECT_LT(fine.second, coarse.second / 2.0) << which;
  }
}

TEST(LieDerivative, LimitNeedsTheHHatFlow) {
  const auto ou = make_mf_ou_model(-1.0, 0.5, 0.3);
  const auto phi = DirectionSpec::constant(1.0);
  const auto f = make_fixture(ou, 400, phi, 256, true);
  const auto res = coupled(ou, f, 16, phi, 0, CoupledOptions{true, true, true, false, 1, {}, -1, 2.0});
  EXPECT_LT(res.ld_limit, 0.01);
  EXPECT_GT(res.ld_limit_h_only, 0.1);
}

TEST(DecoupledModel, LimitFlowsEqualParticleFlows) {
  const auto ou = make_mf_ou_model(-1.0, 0.0, 0.3);
  const auto phi = DirectionSpec::linear(1.0, 0.0);
  const auto f = make_fixture(ou, 200, phi, 256, false);
  const auto res = coupled(ou, f, 16, phi, 2, CoupledOptions{true, true, true, true, 3, {}, 100, 2.0});
  EXPECT_EQ(res.paths.max_sup_gap(), 0.0);
  EXPECT_EQ(max_abs(res.dir_sup), 0.0);
  EXPECT_EQ(max_abs(res.mall_sup), 0.0);
  EXPECT_EQ(max_abs(res.hhat_T), 0.0);
  EXPECT_EQ(max_abs(res.cross_sup), 0.0);
  EXPECT_EQ(res.zeta_moment, 0.0);
  EXPECT_EQ(res.bismut_particle, res.bismut_limit);
}

TEST(DirectionalFlow, MatchesFiniteDifferenceOfParticleSystem) {
  const auto km = make_kuramoto_model(1.0, 0.5);
  const TimeGrid grid(1.0, 200);
  const std::size_t N = 16;
  const auto bank = make_noise_bank(9, N, grid, 1);
  const auto x0 = sample_initial(InitialLaw::uniform(-1.0, 1.0), 10, N, 1);
  const auto phi = DirectionSpec::tanh(1.0);
  const auto v0 = initial_directions(phi, x0, 1);
  const double eps = 1e-6;
  auto run = [&](double e) {
    std::vector<double> x = x0;
    for (std::size_t i = 0; i < N; ++i) x[i] += e * v0[i];
    ParticleCloud pc{1, 0, x};
    for (int n = 0; n < grid.n_steps; ++n) pc = step_particles(km, std::move(pc), bank, grid);
    return pc.x;
  };
  ParticleCloud pc{1, 0, x0};
  std::vector<double> v = v0;
  for (int n = 0; n < grid.n_steps; ++n) {
    auto vn = step_directional_particle(km, pc, v, bank, grid);
    pc = step_particles(km, std::move(pc), bank, grid);
    v = std::move(vn);
  }
  const auto xp = run(eps), xm = run(-eps);
  for (std::size_t i = 0; i < N; ++i) EXPECT_NEAR((xp[i] - xm[i]) / (2.0 * eps), v[i], 1e-6);
}

TEST(DirectionalFlow, LimitFlowMatchesFiniteDifferenceOfPerturbedLaw) {
  const auto km = make_kuramoto_model(1.0, 0.5);
  const TimeGrid grid(1.0, 200);
  const std::size_t M = 512, N = 8;
  const auto init = InitialLaw::uniform(-1.0, 1.0);
  const auto phi = DirectionSpec::linear(1.0, 0.25);
  const auto bank_ref = make_noise_bank(11, M, grid, 1);
  const auto aux = run_auxiliary(km, M, bank_ref, grid, init, phi, 12);
  const auto xr = sample_initial(init, 12, M, 1);
  const auto bank = make_noise_bank(13, N, grid, 1);
  const auto x0 = sample_initial(init, 14, N, 1);
  const double eps = 1e-6;
  auto run = [&](double e) {
    auto shift = [&](std::vector<double> x) {
      const auto dv = initial_directions(phi, x, 1);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += e * dv[i];
      return x;
    };
    auto law = std::make_shared<const FrozenLaw>(run_reference_from(km, shift(xr), bank_ref, grid, false));
    LimitCloud lc{ParticleCloud{1, 0, shift(x0)}, law};
    for (int n = 0; n < grid.n_steps; ++n) lc = step_limit_copies(km, std::move(lc), bank, grid);
    return lc.copies.x;
  };
  auto law = std::make_shared<const FrozenLaw>(run_reference_from(km, xr, bank_ref, grid, false));
  LimitCloud lc{ParticleCloud{1, 0, x0}, law};
  auto u = initial_directions(phi, x0, 1);
  for (int n = 0; n < grid.n_steps; ++n) {
    auto un = step_directional_limit(km, lc, u, &aux, bank, grid);
    lc = step_limit_copies(km, std::move(lc), bank, grid);
    u = std::move(un);
  }
  const auto yp = run(eps), ym = run(-eps);
  for (std::size_t i = 0; i < N; ++i) EXPECT_NEAR((yp[i] - ym[i]) / (2.0 * eps), u[i], 1e-6);
}

TEST(Linearity, ScalingByTwoAndSignFlipAreExact) {
  const auto km = make_kuramoto_model(1.0, 0.5);
  const auto phi = DirectionSpec::linear(1.0, 0.5);
  const CoupledOptions opt{true, true, true, true, 2, {}, -1, 2.0};
  const auto base = coupled(km, make_fixture(km, 100, phi, 256, false), 16, phi, 3, opt);
  for (double s : {2.0, -1.0}) {
    const auto phs = DirectionSpec::linear(s, 0.5 * s);
    const auto res = coupled(km, make_fixture(km, 100, phs, 256, false), 16, phs, 3, opt);
    for (auto [a, b] : {std::pair{&base.v_T, &res.v_T}, {&base.u_T, &res.u_T}, {&base.own_T, &res.own_T},
                        {&base.cross_T, &res.cross_T}, {&base.wlim_T, &res.wlim_T}, {&base.hhat_T, &res.hhat_T},
                        {&base.bismut_particle, &res.bismut_particle}, {&base.bismut_limit, &res.bismut_limit}}) {
      ASSERT_EQ(a->size(), b->size());
      for (std::size_t i = 0; i < a->size(); ++i) EXPECT_EQ(s * (*a)[i], (*b)[i]);
    }
    EXPECT_EQ(res.x_T, base.x_T);
  }
}

TEST(Linearity, AdditiveInTheField) {
  const auto km = make_kuramoto_model(1.0, 0.5);
  const CoupledOptions opt{true, true, true, true, 2, {}, -1, 2.0};
  const auto p1 = DirectionSpec::linear(1.0, 0.0), p2 = DirectionSpec::constant(0.5), p12 = DirectionSpec::linear(1.0, 0.5);
  const auto a = coupled(km, make_fixture(km, 100, p1, 256, false), 16, p1, 4, opt);
  const auto b = coupled(km, make_fixture(km, 100, p2, 256, false), 16, p2, 4, opt);
  const auto c = coupled(km, make_fixture(km, 100, p12, 256, false), 16, p12, 4, opt);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_NEAR(a.v_T[i] + b.v_T[i], c.v_T[i], 1e-13);
    EXPECT_NEAR(a.u_T[i] + b.u_T[i], c.u_T[i], 1e-13);
    EXPECT_NEAR(a.bismut_particle[i] + b.bismut_particle[i], c.bismut_particle[i], 1e-12);
  }
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_NEAR(a.own_T[k] + b.own_T[k], c.own_T[k], 1e-13);
    EXPECT_NEAR(a.hhat_T[k] + b.hhat_T[k], c.hhat_T[k], 1e-13);
  }
}

TEST(DirectionalFlow, GapMomentDecreasesWithN) {
  const auto km = make_kuramoto_model(1.0, 0.5);
  const auto phi = DirectionSpec::linear(1.0, 0.0);
  const auto f = make_fixture(km, 100, phi, 8192, false);
  std::vector<double> moments, ses;
  for (std::size_t N : {32, 128, 512}) {
    std::vector<double> vals;
    for (std::uint64_t r = 0; r < 16; ++r) {
      const auto res = coupled(km, f, N, phi, r, CoupledOptions{true, true, false, false, 1, {}, -1, 2.0});
      double s = 0.0;
      for (double g : res.dir_sup) s += g * g;
      vals.push_back(s / static_cast<double>(N));
    }
    const auto e = mean_estimate(vals, 2.0);
    moments.push_back(e.value);
    ses.push_back(e.std_error);
  }
  for (std::size_t i = 1; i < moments.size(); ++i) EXPECT_LT(moments[i], moments[i - 1] + ses[i] + ses[i - 1]);
  EXPECT_LT(moments.back(), moments.front());
}

TEST(RunCoupled, ConfigurationErrors) {
  const auto km = make_kuramoto_model(1.0, 0.5);
  const auto phi = DirectionSpec::constant(1.0);
  auto f = make_fixture(km, 10, phi, 64, false);
  const auto bank = make_noise_bank(1, 4, f.grid, 1);
  CoupledInputs in{f.setup.law, nullptr, &f.weight, phi, std::vector<double>(4, 0.0)};
  EXPECT_THROW(run_coupled(km, f.grid, bank, 4, in, CoupledOptions{}), ConfigError);
  in.aux = f.setup.aux.get();
  in.weight = nullptr;
  EXPECT_THROW(run_coupled(km, f.grid, bank, 4, in, CoupledOptions{}), ConfigError);
  in.weight = &f.weight;
  in.x0.resize(3);
  EXPECT_THROW(run_coupled(km, f.grid, bank, 4, in, CoupledOptions{}), DimensionError);
  in.x0.resize(4);
  in.law = nullptr;
  EXPECT_THROW(run_coupled(km, f.grid, bank, 4, in, CoupledOptions{}), ConfigError);
}
