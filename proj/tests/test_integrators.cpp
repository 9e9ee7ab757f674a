#include "msc/commands.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <random>

using namespace msc;

namespace {

Scene torus() { return load_scene(MSC_PRESETS "/fig_validation_torus.json"); }

Model free_particles(int n) {
  Model m;
  m.topology.vertex_count = n;
  m.masses = MassModel::uniform(n, 1.5);
  m.charges = ChargeSet::uniform(n, 0.0);
  return m;
}

// Spring-only implicit solver written directly from its definition: dense
// (M + h^2 L), local projection, no Coulomb or external terms.
VecX spring_only_step(const VecX& x, const VecX& x_prev, const Model& m, double h, int iterations) {
  const ElasticOperators ops = assemble_operators(m.topology, m.vertex_count());
  const VecX md = mass_diagonal(m.masses);
  const MatX a = MatX(md.asDiagonal()) + h * h * MatX(ops.L);
  const Eigen::LDLT<MatX> ldlt(a);
  const VecX y = 2.0 * x - x_prev;
  VecX cur = y;
  for (int it = 0; it < iterations; ++it) cur = ldlt.solve(md.cwiseProduct(y) + h * h * (ops.J * local_step(cur, m.topology).d));
  return cur;
}

double total(const SimState& s, const Model& m, const SimParams& p) { return total_energy(s, m, p).total; }

}  // namespace

TEST(Imex, BallisticContinuation) {
  const Model m = free_particles(4);
  SimParams p;
  p.h = 0.1;
  VecX x = VecX::LinSpaced(12, -1, 1), v = VecX::LinSpaced(12, 0.5, -0.5);
  Simulator sim(m, p, IntegratorKind::Imex, SimState::from_positions(x, v, p.h));
  SimState prev = sim.state();
  for (int s = 0; s < 5; ++s) {
    const SimState cur = sim.state();
    sim.step();
    EXPECT_LT((sim.state().positions - (2.0 * cur.positions - cur.prev_positions)).norm(), 1e-13);
    prev = cur;
  }
  Simulator verlet(m, p, IntegratorKind::Verlet, SimState::from_positions(x, v, p.h));
  for (int s = 0; s < 5; ++s) verlet.step();
  EXPECT_LT((verlet.state().positions - (x + 5 * p.h * v)).norm(), 1e-13);
}

TEST(Imex, ZeroChargeEqualsSpringOnlySolver) {
  Scene sc = torus();
  sc.model.charges.charges.setZero();
  sc.params.local_global_iterations = 3;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0, 0.2);
  VecX v(sc.initial.velocities.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = g(rng);
  Simulator sim(sc.model, sc.params, IntegratorKind::Imex, SimState::from_positions(sc.initial.positions, v, sc.params.h));
  for (int s = 0; s < 30; ++s) {
    const SimState before = sim.state();
    sim.step();
    const VecX ref = spring_only_step(before.positions, before.prev_positions, sc.model, sc.params.h, 3);
    ASSERT_LE((sim.state().positions - ref).lpNorm<Eigen::Infinity>(), 1e-12 * ref.lpNorm<Eigen::Infinity>()) << s;
  }
}

TEST(Imex, LargeStepStaysFiniteWhereVerletDiverges) {
  Scene sc = torus();
  const Scene imex = retimed(sc, 0.15, IntegratorKind::Imex);
  EXPECT_NO_THROW(run_scene(imex));
  const Scene verlet = retimed(sc, 0.15, IntegratorKind::Verlet);
  bool diverged = false;
  try {
    const Trajectory t = run_scene(verlet);
    const auto e = energy_series(t, sc.model, sc.params);
    diverged = std::abs(e.back().total - e.front().total) > std::abs(e.front().total);
  } catch (const DivergenceError&) {
    diverged = true;
  }
  EXPECT_TRUE(diverged);
}

TEST(Imex, PinnedVerticesStayPut) {
  Scene sc = load_scene(MSC_PRESETS "/fig_qualdiffcloth_sheet.json");
  sc.steps = 20;
  for (IntegratorKind k : {IntegratorKind::Imex, IntegratorKind::Verlet}) {
    sc.integrator = k;
    const Scene run = retimed(sc, k == IntegratorKind::Imex ? sc.params.h : 1e-3, k);
    const Trajectory t = run_scene(run);
    for (int v : sc.model.pinned)
      EXPECT_EQ(Vec3(t.states.back().positions.segment<3>(3 * v)), Vec3(sc.initial.positions.segment<3>(3 * v)));
    EXPECT_GT((t.states.back().positions - sc.initial.positions).norm(), 1e-3);
  }
}

TEST(Verlet, HarmonicPeriod) {
  // One free mass on a spring to a pinned anchor.
  const double k = 7.0, mass = 0.3;
  Model m = free_particles(2);
  m.masses.masses << 1.0, mass;
  m.topology.springs.push_back({0, 1, k, 1.0});
  m.pinned = {0};
  const double period = 2 * M_PI * std::sqrt(mass / k);
  SimParams p;
  p.h = period / 1000;
  VecX x(6);
  x << 0, 0, 0, 1.2, 0, 0;
  Simulator sim(m, p, IntegratorKind::Verlet, SimState::at_rest(x));
  std::vector<double> crossings;
  double prev = 0.2;
  for (int s = 0; s < 5500; ++s) {
    const double t0 = sim.state().time;
    sim.step();
    const double cur = sim.state().positions[3] - 1.0;
    if (prev > 0 && cur <= 0) crossings.push_back(t0 + p.h * prev / (prev - cur));
    prev = cur;
  }
  ASSERT_GE(crossings.size(), 5u);
  const double measured = (crossings.back() - crossings.front()) / static_cast<double>(crossings.size() - 1);
  EXPECT_NEAR(measured, period, 0.01 * period);
}

TEST(Verlet, BoundedEnergyDrift) {
  Scene sc = torus();
  const Scene run = retimed(sc, 1e-3, IntegratorKind::Verlet);
  Simulator sim(run.model, run.params, IntegratorKind::Verlet, run.initial);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0, 0.3);
  VecX v(run.initial.velocities.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = g(rng);
  sim.reset(SimState::from_positions(run.initial.positions, v, 1e-3));
  const double e0 = total(sim.state(), run.model, run.params);
  double worst = 0.0;
  for (int s = 0; s < 10000; ++s) {
    sim.step();
    if (s % 100 == 99) worst = std::max(worst, std::abs(total(sim.state(), run.model, run.params) - e0));
  }
  EXPECT_LT(worst / std::abs(e0), 1e-2);
}

TEST(Verlet, FineStepConservesEnergyOverFifteenSeconds) {
  const Scene run = retimed(torus(), 1e-3, IntegratorKind::Verlet);
  Scene s = run;
  s.steps = 15000;
  s.record_every = 100;
  const Trajectory t = run_scene(s);
  const auto e = energy_series(t, s.model, s.params);
  for (const auto& f : e) EXPECT_LT(std::abs(f.total - e.front().total), 0.01 * std::abs(e.front().total));
}

TEST(Energy, Breakdown) {
  Model m = free_particles(2);
  m.topology.springs.push_back({0, 1, 3.0, std::sqrt(2.0)});
  m.forcing.constant_force = VecX::Constant(6, 2.0);
  SimParams p;
  p.gravity = Vec3(0, 0, -9.81);
  VecX x(6);
  x << 0, 0, 1, 1, 0, 2;
  const EnergyBreakdown e = total_energy(SimState::at_rest(x), m, p);
  EXPECT_EQ(e.kinetic, 0.0);
  EXPECT_EQ(e.elastic, 0.0);
  EXPECT_EQ(e.coulomb, 0.0);
  EXPECT_DOUBLE_EQ(e.external_potential, -2.0 * x.sum() + 1.5 * 9.81 * 3.0);
  EXPECT_EQ(e.total, e.external_potential);

  Model pair = free_particles(2);
  pair.charges = ChargeSet::uniform(2, 1.0);
  x << 0, 0, 0, 1, 0, 0;
  const EnergyBreakdown c = total_energy(SimState::at_rest(x), pair, SimParams{});
  EXPECT_DOUBLE_EQ(c.coulomb, kCoulombConstant);
  EXPECT_NEAR(c.total, c.kinetic + c.elastic + c.coulomb + c.external_potential, 1e-12 * std::abs(c.total));
}

TEST(Energy, ExternalChargePotentialMatchesForce) {
  Model m = free_particles(1);
  m.charges = ChargeSet::uniform(1, 2e-6);
  m.forcing.external_charges.push_back({Vec3(1, 2, 3), -5e-6, 0});
  SimParams p;
  VecX x(3);
  x << 0.3, -0.2, 0.1;
  const VecX f = net_external_force(SimState::at_rest(x), m, p);
  const double step = 1e-6;
  for (int a = 0; a < 3; ++a) {
    VecX xp = x, xm = x;
    xp[a] += step;
    xm[a] -= step;
    EXPECT_NEAR(-(external_potential(xp, m, p) - external_potential(xm, m, p)) / (2 * step), f[a], 1e-6 * f.norm());
  }
}

TEST(Rollout, ZeroStepsAndDeterminism) {
  Scene sc = torus();
  sc.steps = 0;
  EXPECT_EQ(run_scene(sc).size(), 1u);
  sc.steps = 40;
  sc.record_every = 7;
  const Trajectory a = run_scene(sc), b = run_scene(sc);
  ASSERT_EQ(a.size(), 7u);  // 0, 7, ..., 35, 40
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a.states[k].positions, b.states[k].positions);
  EXPECT_DOUBLE_EQ(a.states.back().time, 40 * sc.params.h);
}

TEST(Rollout, DivergenceCarriesStepAndPartialFrames) {
  Scene sc = retimed(torus(), 0.6, IntegratorKind::Verlet);
  sc.steps = 2000;
  try {
    run_scene(sc);
    FAIL() << "expected divergence";
  } catch (const RolloutDivergence& e) {
    EXPECT_GT(e.step(), 0);
    EXPECT_EQ(static_cast<long>(e.partial().size()), e.step());
    for (const SimState& s : e.partial().states) EXPECT_TRUE(s.finite());
  }
}

TEST(Rollout, ScheduleUpdatesChargesBeforeEachStep) {
  Scene sc = torus();
  sc.tracks.push_back({"all", {{0.0, 0.0}, {0.15, 15e-6}}});
  sc.model.charges = charge_at_time(sc, 0.0);
  sc.steps = 20;
  const Trajectory t = run_scene(sc);
  for (std::size_t k = 0; k < t.size(); ++k) {
    const double expect = std::min(t.frame_time(k) / 0.15, 1.0) * 15e-6;
    EXPECT_NEAR(t.charges[k][0], expect, 1e-18);
  }
}

TEST(RelativeError, IdenticalAndMismatched) {
  Scene sc = torus();
  sc.steps = 30;
  const Trajectory t = run_scene(sc);
  const ErrorSeries s = relative_energy_error(t, t, sc.model, sc.params);
  EXPECT_EQ(s.error.size(), t.size());
  for (double e : s.error) EXPECT_EQ(e, 0.0);
  Trajectory other = t;
  for (SimState& st : other.states) st.positions.conservativeResize(9);
  EXPECT_THROW(relative_energy_error(t, other, sc.model, sc.params), ConfigError);
}

TEST(RelativeError, SharedTimestampsOnly) {
  const std::vector<double> t{0.0, 0.1, 0.2, 0.3}, e{1.0, 1.1, 1.2, 1.3};
  const std::vector<double> rt{0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3}, re{1, 1, 1, 1, 1, 1, 1};
  const ErrorSeries s = relative_energy_error(t, e, rt, re);
  ASSERT_EQ(s.error.size(), 4u);
  EXPECT_NEAR(s.error[3], 0.3, 1e-12);
  EXPECT_NEAR(s.max, 0.3, 1e-12);
  EXPECT_NEAR(s.mean, 0.15, 1e-12);
}

TEST(Torus, SmallStepAgreementImproves) {
  const Scene sc = torus();
  std::vector<double> dist;
  for (double h : {1e-2, 5e-3, 2.5e-3}) {
    Scene a = retimed(sc, h, IntegratorKind::Imex);
    a.steps = std::lround(1.0 / h);
    Scene b = retimed(sc, h, IntegratorKind::Verlet);
    b.steps = a.steps;
    const VecX xa = run_scene(a).states.back().positions, xb = run_scene(b).states.back().positions;
    double d = 0.0;
    for (Eigen::Index i = 0; i < xa.size() / 3; ++i) d = std::max(d, (xa.segment<3>(3 * i) - xb.segment<3>(3 * i)).norm());
    dist.push_back(d);
  }
  EXPECT_LT(dist[1], dist[0]);
  EXPECT_LT(dist[2], dist[1]);
}

TEST(Torus, DdefForcesTrackBruteForceAlongRollout) {
  Scene sc = torus();
  sc.steps = 60;
  sc.record_every = 20;
  const Trajectory t = run_scene(sc);
  for (int m : {100, 1000}) {
    SimParams p = sc.params;
    p.ddef_m = m;
    for (const SimState& s : t.states) {
      const VecX exact = pairwise_forces_brute(s.positions, sc.model.charges, p.softening_epsilon);
      const VecX approx = ddef_forces(s.positions, sc.model.charges, p);
      EXPECT_LT(mean_of(relative_field_errors(approx, exact)), 0.1) << "m=" << m;
    }
  }
  Scene d = sc;
  d.params.ddef_enabled = true;
  d.params.ddef_m = 300;
  EXPECT_NO_THROW(run_scene(d));
}

TEST(Simulator, TimestepChangeKeepsVelocity) {
  Scene sc = torus();
  Simulator sim = make_simulator(sc);
  for (int s = 0; s < 5; ++s) sim.step();
  const VecX v = sim.state().velocities;
  sim.set_timestep(0.03);
  EXPECT_EQ(sim.params().h, 0.03);
  EXPECT_LT((sim.state().positions - sim.state().prev_positions - 0.03 * v).norm(), 1e-14);
  EXPECT_THROW(sim.set_timestep(-1.0), std::invalid_argument);
  sim.step();
  EXPECT_TRUE(sim.state().finite());
}
