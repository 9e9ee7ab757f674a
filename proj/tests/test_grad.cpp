#include "msc/commands.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace msc;

namespace {

struct System {
  Model model;
  SimState state;
  SimParams params;
};

// Random charged mass-spring system with a field, an external charge and one pinned vertex.
System random_system(int n, std::uint64_t seed, bool forcing = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1), pos(0, 1);
  System s;
  MeshSource mesh;
  for (int i = 0; i < n; ++i) mesh.vertices.emplace_back(pos(rng), pos(rng), pos(rng) + 1.0);
  gen::connect_nearest(mesh, 4);
  s.model.topology = springs_from_mesh(mesh, 1.0);
  for (Spring& sp : s.model.topology.springs) {
    sp.k = 5.0 + 10.0 * pos(rng);
    sp.rest_length *= 1.0 + 0.2 * u(rng);
  }
  s.model.masses.masses = VecX(n);
  s.model.charges = ChargeSet::uniform(n, 0.0);
  for (int i = 0; i < n; ++i) {
    s.model.masses.masses[i] = 0.5 + pos(rng);
    s.model.charges.charges[i] = 3e-6 * u(rng);
  }
  if (forcing) {
    s.model.forcing.field = make_field("y*z*1e4", "-x*1e4", "(x+y)/z*1e4");
    s.model.forcing.external_charges.push_back({Vec3(0.5, 0.5, 3.0), 4e-6, 0});
    s.model.pinned = {0};
  }
  s.params.h = 0.05;
  s.params.local_global_iterations = 1000;
  s.params.local_global_tolerance = 1e-15;
  s.params.softening_epsilon = 0.0;
  VecX v(3 * n);
  for (int i = 0; i < 3 * n; ++i) v[i] = 0.3 * u(rng);
  for (int p : s.model.pinned) v.segment<3>(3 * p).setZero();
  s.state = SimState::from_positions(mesh.stacked_positions(), v, s.params.h);
  return s;
}

VecX forward(const Model& m, const SimParams& p, const VecX& x, const VecX& v) {
  const SimState s = SimState::from_positions(x, v, p.h);
  const ElasticOperators ops = assemble_operators(m.topology, m.vertex_count());
  const PrefactoredSystem sys = prefactor(mass_diagonal(m.masses), ops.L, p.h, m.pinned);
  return imex_step(s, m, ops, sys, p, pairwise_forces_brute(x, m.charges, p.softening_epsilon)).positions;
}

double rel(const MatX& a, const MatX& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

void check_step_blocks(const System& s, ParamKind kind) {
  const ParamSelector sel = kind == ParamKind::Charges ? ParamSelector::each(kind, s.model.vertex_count())
                                                       : ParamSelector::each(kind, s.model.topology.size());
  const VecX x = s.state.positions, v = s.state.velocities;
  const VecX x1 = forward(s.model, s.params, x, v);
  SimState next = SimState::from_positions(x1, (x1 - x) / s.params.h, s.params.h);
  const StepJacobians j = step_jacobians(s.state, next, s.model, s.params, sel);
  const Eigen::Index n3 = x.size();
  MatX fx(n3, n3), fv(n3, n3), ft(n3, sel.size());
  for (Eigen::Index a = 0; a < n3; ++a) {
    const double e = 1e-6;
    VecX xp = x, xm = x, vp = v, vm = v;
    xp[a] += e, xm[a] -= e, vp[a] += e, vm[a] -= e;
    fx.col(a) = (forward(s.model, s.params, xp, v) - forward(s.model, s.params, xm, v)) / (2 * e);
    fv.col(a) = (forward(s.model, s.params, x, vp) - forward(s.model, s.params, x, vm)) / (2 * e);
  }
  const VecX theta = sel.values(s.model);
  for (Eigen::Index g = 0; g < sel.size(); ++g) {
    const double e = 1e-6 * std::abs(theta[g]) + 1e-12;
    Model mp = s.model, mm = s.model;
    VecX tp = theta, tm = theta;
    tp[g] += e, tm[g] -= e;
    sel.apply(mp, tp);
    sel.apply(mm, tm);
    ft.col(g) = (forward(mp, s.params, x, v) - forward(mm, s.params, x, v)) / (2 * e);
  }
  // Pinned vertices never move in a rollout, so their columns of dX are not part of the tangent.
  MatX jx = j.d_phi_dX;
  for (int p : s.model.pinned) {
    jx.middleCols<3>(3 * p).setZero();
    fx.middleCols<3>(3 * p).setZero();
  }
  EXPECT_LT(rel(jx, fx), 1e-4);
  EXPECT_LT(rel(j.d_phi_dV, fv), 1e-4);
  EXPECT_LT(rel(j.d_phi_d_theta, ft), 1e-4);
  const MatX hs = j.H;
  EXPECT_LT(rel(hs, hs.transpose()), 1e-14);
}

}  // namespace

TEST(StepJacobians, ChargeBlocksMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) check_step_blocks(random_system(12, seed), ParamKind::Charges);
}

TEST(StepJacobians, SpringBlocksMatchFiniteDifferences) {
  for (std::uint64_t seed = 4; seed <= 6; ++seed) check_step_blocks(random_system(12, seed), ParamKind::SpringConstants);
}

TEST(StepJacobians, TwentyVertexChargedScene) { check_step_blocks(random_system(20, 7, false), ParamKind::Charges); }

TEST(StepJacobians, ZeroChargeTwoVertexSystem) {
  System s = random_system(2, 8, false);
  s.model.charges.charges.setZero();
  check_step_blocks(s, ParamKind::Charges);
}

TEST(StepJacobians, SmallStepLimit) {
  System s = random_system(10, 9);
  s.model.pinned.clear();
  s.params.h = 1e-6;
  const SimState st = SimState::from_positions(s.state.positions, s.state.velocities, s.params.h);
  const VecX x1 = forward(s.model, s.params, st.positions, st.velocities);
  const SimState next = SimState::from_positions(x1, (x1 - st.positions) / s.params.h, s.params.h);
  const StepJacobians j = step_jacobians(st, next, s.model, s.params, ParamSelector::all(ParamKind::Charges, s.model));
  EXPECT_LT((j.d_phi_dX - MatX::Identity(30, 30)).norm(), 1e-6);
  EXPECT_LT(j.d_phi_dV.norm(), 1e-5);
}

namespace {

double rollout_loss(const System& s, const ParamSelector& sel, const VecX& theta, IntegratorKind kind, long steps,
                    const LossSpec& loss) {
  Model m = s.model;
  sel.apply(m, theta);
  RolloutOptions o;
  o.kind = kind;
  o.steps = steps;
  return loss.value(rollout(s.state, m, s.params, o));
}

void check_rollout_gradient(System s, ParamKind kind, IntegratorKind integ, long steps) {
  if (integ == IntegratorKind::Verlet) s.params.h = 0.01;
  s.state = SimState::from_positions(s.state.positions, s.state.velocities, s.params.h);
  const ParamSelector sel = ParamSelector::each(kind, 3);
  RolloutOptions o;
  o.kind = integ;
  o.steps = steps;
  const Trajectory t = rollout(s.state, s.model, s.params, o);
  VecX target = t.states.back().positions;
  for (Eigen::Index i = 0; i < target.size(); ++i) target[i] += 0.01 * std::sin(1.0 + i);
  LossSpec loss = LossSpec::last_frame(static_cast<std::size_t>(steps), target);
  loss.targets.push_back({static_cast<std::size_t>(steps / 2), t.states[steps / 2].positions * 1.01, 0.5});
  const GradientResult g = backprop_rollout(t, s.model, s.params, loss, sel);
  const VecX theta = sel.values(s.model);
  for (Eigen::Index p = 0; p < sel.size(); ++p) {
    const double e = 1e-6 * std::abs(theta[p]);
    VecX tp = theta, tm = theta;
    tp[p] += e, tm[p] -= e;
    const double fd = (rollout_loss(s, sel, tp, integ, steps, loss) - rollout_loss(s, sel, tm, integ, steps, loss)) / (2 * e);
    EXPECT_NEAR(g.gradient[p], fd, 1e-4 * std::abs(fd)) << "param " << p;
  }
}

}  // namespace

TEST(Backprop, TwoStepImexCharges) { check_rollout_gradient(random_system(8, 10), ParamKind::Charges, IntegratorKind::Imex, 2); }
TEST(Backprop, TwoStepImexSprings) {
  check_rollout_gradient(random_system(8, 11), ParamKind::SpringConstants, IntegratorKind::Imex, 2);
}
TEST(Backprop, LongerImexCharges) { check_rollout_gradient(random_system(10, 12), ParamKind::Charges, IntegratorKind::Imex, 20); }
TEST(Backprop, LongerImexSprings) {
  check_rollout_gradient(random_system(10, 13), ParamKind::SpringConstants, IntegratorKind::Imex, 20);
}
TEST(Backprop, VerletCharges) { check_rollout_gradient(random_system(10, 14), ParamKind::Charges, IntegratorKind::Verlet, 30); }
TEST(Backprop, VerletSprings) {
  check_rollout_gradient(random_system(10, 15), ParamKind::SpringConstants, IntegratorKind::Verlet, 30);
}

TEST(Backprop, InitialFrameLossHasZeroGradient) {
  const System s = random_system(8, 16);
  RolloutOptions o;
  o.steps = 5;
  const Trajectory t = rollout(s.state, s.model, s.params, o);
  const LossSpec loss = LossSpec::last_frame(0, s.state.positions * 1.1);
  const GradientResult g = backprop_rollout(t, s.model, s.params, loss, ParamSelector::all(ParamKind::Charges, s.model));
  EXPECT_GT(g.loss, 0.0);
  EXPECT_EQ(g.gradient, VecX::Zero(1));
}

TEST(Backprop, UnrecordedFrameIsAnError) {
  const System s = random_system(6, 17);
  RolloutOptions o;
  o.steps = 3;
  const Trajectory t = rollout(s.state, s.model, s.params, o);
  EXPECT_THROW(backprop_rollout(t, s.model, s.params, LossSpec::last_frame(9, s.state.positions),
                                ParamSelector::all(ParamKind::Charges, s.model)),
               ConfigError);
}

TEST(Backprop, MatchesChainOfFreshStepJacobians) {
  const System s = random_system(10, 18);
  const ParamSelector sel = ParamSelector::all(ParamKind::Charges, s.model);
  RolloutOptions o;
  o.steps = 6;
  const Trajectory t = rollout(s.state, s.model, s.params, o);
  const VecX target = t.states.back().positions * 0.99;
  const GradientResult g = backprop_rollout(t, s.model, s.params, LossSpec::last_frame(6, target), sel);
  MatX dx = MatX::Zero(30, 1), dv = MatX::Zero(30, 1);
  for (int f = 0; f < 6; ++f) {
    const StepJacobians j = step_jacobians(t.states[f], t.states[f + 1], s.model, s.params, sel);
    const MatX dx1 = j.d_phi_dX * dx + j.d_phi_dV * dv + j.d_phi_d_theta;
    dv = (dx1 - dx) / s.params.h;
    dx = dx1;
  }
  const double chain = (2.0 / 10.0) * (dx.col(0).dot(t.states.back().positions - target));
  EXPECT_NEAR(g.gradient[0], chain, 1e-10 * std::abs(chain));
}

TEST(Estimation, GuessAtTargetStopsImmediately) {
  Scene sc = load_scene(MSC_PRESETS "/fig_validation_torus.json");
  sc.steps = 20;
  const Trajectory t = run_scene(sc);
  const EstimationProblem pb = make_estimation_problem(sc, t.states.back(), ParamSelector::all(ParamKind::Charges, sc.model), true);
  const EstimationReport r = estimate_parameters(pb, ParamSelector::all(ParamKind::Charges, sc.model).values(sc.model), {});
  EXPECT_EQ(r.iterations, 0);
  EXPECT_EQ(r.loss.front(), 0.0);
  EXPECT_TRUE(r.converged);
}

TEST(Estimation, ChargeRecoveryOnSmallScene) {
  Scene sc = load_scene(MSC_PRESETS "/fig_validation_torus.json");
  sc.steps = 40;
  sc.params.local_global_iterations = 200;
  sc.params.local_global_tolerance = 1e-12;
  const Trajectory t = run_scene(sc);
  const ParamSelector sel = ParamSelector::all(ParamKind::Charges, sc.model);
  const EstimationProblem pb = make_estimation_problem(sc, t.states.back(), sel, true);
  OptimizerConfig cfg;
  cfg.parameter_scale = kMicroCoulomb;
  cfg.step_size = 1.0;
  cfg.step_growth = 1.5;
  cfg.max_iterations = 60;
  cfg.relative_change_tolerance = 1e-7;
  const EstimationReport r = estimate_parameters(pb, VecX::Constant(1, 4.5 * kMicroCoulomb), cfg);
  EXPECT_NEAR(r.theta[0], 6 * kMicroCoulomb, 0.02 * 6 * kMicroCoulomb);
  for (std::size_t i = 1; i < r.loss.size(); ++i) EXPECT_LT(r.loss[i], r.loss[i - 1]);
}

TEST(Estimation, SimplifiedHessianStillDescends) {
  Scene sc = load_scene(MSC_PRESETS "/fig_validation_torus.json");
  sc.steps = 40;
  sc.params.local_global_iterations = 200;
  sc.params.local_global_tolerance = 1e-12;
  const Trajectory t = run_scene(sc);
  const ParamSelector sel = ParamSelector::all(ParamKind::Charges, sc.model);
  const EstimationProblem pb = make_estimation_problem(sc, t.states.back(), sel, false);
  OptimizerConfig cfg;
  cfg.parameter_scale = kMicroCoulomb;
  cfg.max_iterations = 10;
  const EstimationReport r = estimate_parameters(pb, VecX::Constant(1, 4.5 * kMicroCoulomb), cfg);
  EXPECT_GE(r.iterations, 3);
  for (std::size_t i = 1; i < r.loss.size(); ++i) EXPECT_LT(r.loss[i], r.loss[i - 1]);
}

TEST(Estimation, DivergentTrialStepsAreHalved) {
  Scene sc = load_scene(MSC_PRESETS "/fig_validation_torus.json");
  sc.integrator = IntegratorKind::Verlet;
  sc.steps = 30;
  const Trajectory t = run_scene(sc);
  const ParamSelector sel = ParamSelector::all(ParamKind::Charges, sc.model);
  const EstimationProblem pb = make_estimation_problem(sc, t.states.back(), sel, true);
  OptimizerConfig cfg;
  cfg.parameter_scale = kMicroCoulomb;
  cfg.step_size = 1e9;  // the first trials explode
  cfg.max_iterations = 3;
  EstimationReport r;
  EXPECT_NO_THROW(r = estimate_parameters(pb, VecX::Constant(1, 5 * kMicroCoulomb), cfg));
  EXPECT_GT(r.rollouts, 3);
  EXPECT_LE(r.loss.back(), r.loss.front());
}
