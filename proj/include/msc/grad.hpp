#pragma once

// Derivatives of the IMEX and Verlet steps with respect to the previous state
// and to spring constants or charges, tangent propagation through a recorded
// rollout, and gradient-descent parameter estimation.
//
// The IMEX step is differentiated at its converged fixed point
//   M (X - Y) + h^2 grad E_el(X) = h^2 F(X_t),   Y = X_t + h V_t,
// giving H = M + h^2 (L - J dD/dX) and
//   dX_{t+1} = H^-1 [ M (dX_t + h dV_t) + h^2 (dF/dX dX_t + dF/dtheta - d grad E_el/dtheta) ].

#include "msc/integrators.hpp"

#include <chrono>
#include <map>

namespace msc {

enum class ParamKind { Charges, SpringConstants };

inline ParamKind parse_param_kind(const std::string& s) {
  if (s == "charges" || s == "charge" || s == "q") return ParamKind::Charges;
  if (s == "springs" || s == "spring_constants" || s == "k") return ParamKind::SpringConstants;
  throw ConfigError("unknown parameter kind '" + s + "' (expected charges or springs)");
}

/// Each parameter drives a set of vertices (charges) or springs (stiffness).
struct ParamSelector {
  ParamKind kind = ParamKind::Charges;
  std::vector<std::vector<int>> groups;
  std::vector<std::string> names;

  Eigen::Index size() const { return static_cast<Eigen::Index>(groups.size()); }

  static ParamSelector single(ParamKind kind, std::vector<int> members, std::string name = "all") {
    ParamSelector s;
    s.kind = kind;
    s.groups.push_back(std::move(members));
    s.names.push_back(std::move(name));
    return s;
  }

  static ParamSelector all(ParamKind kind, const Model& model) {
    const std::size_t count = kind == ParamKind::Charges ? static_cast<std::size_t>(model.vertex_count())
                                                         : model.topology.size();
    std::vector<int> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = static_cast<int>(i);
    return single(kind, std::move(idx));
  }

  static ParamSelector each(ParamKind kind, std::size_t count) {
    ParamSelector s;
    s.kind = kind;
    for (std::size_t i = 0; i < count; ++i) {
      s.groups.push_back({static_cast<int>(i)});
      s.names.push_back(std::to_string(i));
    }
    return s;
  }

  void validate(const Model& model) const {
    const int limit = kind == ParamKind::Charges ? static_cast<int>(model.vertex_count())
                                                 : static_cast<int>(model.topology.size());
    if (groups.empty()) throw ConfigError("parameter selector is empty");
    for (const auto& g : groups)
      for (int i : g)
        if (i < 0 || i >= limit) throw ConfigError("parameter selector index " + std::to_string(i) + " out of range");
  }

  /// Current values (the first member of each group).
  VecX values(const Model& model) const {
    VecX v(size());
    for (Eigen::Index g = 0; g < size(); ++g) {
      const int first = groups[static_cast<std::size_t>(g)].front();
      v[g] = kind == ParamKind::Charges ? model.charges.charges[first]
                                        : model.topology.springs[static_cast<std::size_t>(first)].k;
    }
    return v;
  }

  void apply(Model& model, const VecX& theta) const {
    for (Eigen::Index g = 0; g < size(); ++g)
      for (int i : groups[static_cast<std::size_t>(g)]) {
        if (kind == ParamKind::Charges)
          model.charges.charges[i] = theta[g];
        else
          model.topology.springs[static_cast<std::size_t>(i)].k = theta[g];
      }
  }
};

// ---------------------------------------------------------------------------
// Explicit force derivatives at a configuration.

/// d(q_i E(x_i))/dx_i for a user field, by central differences of the field.
inline Mat3 field_jacobian(const VectorField& field, const Vec3& x) {
  Mat3 j;
  for (int d = 0; d < 3; ++d) {
    const double step = 1e-6 * std::max(1.0, std::abs(x[d]));
    Vec3 a = x, b = x;
    a[d] += step;
    b[d] -= step;
    j.col(d) = (field(a) - field(b)) / (2.0 * step);
  }
  return j;
}

/// (d F_explicit / dX) * dx where F_explicit = Coulomb + external terms.
inline MatX explicit_force_jacobian_apply(const VecX& x, const Model& model, const SimParams& params,
                                          const MatX& dx) {
  MatX out = force_jacobian_apply(x, model.charges, params.softening_epsilon, dx);
  const double kc = model.charges.coulomb_constant;
  for (Eigen::Index i = 0; i < model.vertex_count(); ++i) {
    const double q = model.charges.charges[i];
    if (q == 0.0) continue;
    const Vec3 xi = x.segment<3>(3 * i);
    Mat3 blk = Mat3::Zero();
    if (model.forcing.has_field()) blk += q * field_jacobian(model.forcing.field, xi);
    for (const ExternalCharge& e : model.forcing.external_charges) {
      const Vec3 r = xi - e.position;
      if (r.norm() <= params.softening_epsilon || r.norm() == 0.0) continue;
      blk += kc * q * e.charge * coulomb_kernel_jacobian(r);
    }
    if (!blk.isZero(0.0)) out.middleRows<3>(3 * i) += blk * dx.middleRows<3>(3 * i);
  }
  return out;
}

/// Dense dF_explicit/dX (small systems only).
inline MatX explicit_force_jacobian(const VecX& x, const Model& model, const SimParams& params) {
  return explicit_force_jacobian_apply(x, model, params, MatX::Identity(x.size(), x.size()));
}

/// dF_explicit/dtheta for charge parameters (3n x p).
inline MatX explicit_force_charge_derivative(const VecX& x, const Model& model, const SimParams& params,
                                             const ParamSelector& sel) {
  const Eigen::Index n = model.vertex_count();
  const Eigen::Index p = sel.size();
  std::vector<std::vector<int>> member_of(static_cast<std::size_t>(n));
  for (Eigen::Index g = 0; g < p; ++g)
    for (int i : sel.groups[static_cast<std::size_t>(g)]) member_of[static_cast<std::size_t>(i)].push_back(static_cast<int>(g));
  MatX out = MatX::Zero(3 * n, p);
  const double kc = model.charges.coulomb_constant;
  const double eps = params.softening_epsilon;
  auto row = [&](std::size_t iu) {
    const auto i = static_cast<Eigen::Index>(iu);
    const Vec3 xi = x.segment<3>(3 * i);
    const double qi = model.charges.charges[i];
    Vec3 field = Vec3::Zero();  // total field at x_i from everything but i itself
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k == i) continue;
      const Vec3 kern = kc * coulomb_kernel(xi, x.segment<3>(3 * k), eps);
      field += model.charges.charges[k] * kern;
      for (int g : member_of[static_cast<std::size_t>(k)]) out.block<3, 1>(3 * i, g) += qi * kern;
    }
    if (model.forcing.has_field()) field += model.forcing.field(xi);
    for (const ExternalCharge& e : model.forcing.external_charges)
      field += kc * e.charge * coulomb_kernel(xi, e.position, eps);
    for (int g : member_of[iu]) out.block<3, 1>(3 * i, g) += field;
  };
  parallel_for_index(static_cast<std::size_t>(n), row, 8);
  return out;
}

/// d(grad E_el)/dtheta for spring-constant parameters (3n x p).
inline MatX elastic_gradient_stiffness_derivative(const VecX& x, const Model& model, const ParamSelector& sel) {
  MatX out = MatX::Zero(x.size(), sel.size());
  for (Eigen::Index g = 0; g < sel.size(); ++g)
    for (int s : sel.groups[static_cast<std::size_t>(g)]) {
      const Spring& sp = model.topology.springs[static_cast<std::size_t>(s)];
      const Vec3 r = x.segment<3>(3 * sp.i) - x.segment<3>(3 * sp.j);
      const double len = r.norm();
      if (len == 0.0) continue;
      const Vec3 gi = (1.0 - sp.rest_length / len) * r;
      out.block<3, 1>(3 * sp.i, g) += gi;
      out.block<3, 1>(3 * sp.j, g) -= gi;
    }
  return out;
}

/// Right-hand-side parameter term of a step: h^2 (dF/dtheta - d grad E_el/dtheta) for IMEX,
/// or the force derivative alone (scale = 1) for Verlet.
inline MatX force_parameter_derivative(const VecX& x, const Model& model, const SimParams& params,
                                       const ParamSelector& sel) {
  if (sel.kind == ParamKind::Charges) return explicit_force_charge_derivative(x, model, params, sel);
  return -elastic_gradient_stiffness_derivative(x, model, sel);
}

inline void zero_pinned_rows(MatX& m, const std::vector<int>& pinned) {
  for (int v : pinned) m.middleRows<3>(3 * v).setZero();
}

/// H = M + h^2 (L - J dD/dX) evaluated at X_{t+1}.
inline SpMat imex_hessian(const VecX& x_next, const Model& model, const ElasticOperators& ops, double h,
                          bool include_direction_term = true) {
  const VecX m = mass_diagonal(model.masses);
  SpMat k = include_direction_term ? elastic_hessian(x_next, model.topology, ops, 0.0) : ops.L;
  SpMat id(x_next.size(), x_next.size());
  id.setIdentity();
  SpMat hm = SpMat(m.asDiagonal() * id) + (h * h) * k;
  hm.makeCompressed();
  return hm;
}

struct StepJacobians {
  MatX d_phi_d_theta;
  MatX d_phi_dX;
  MatX d_phi_dV;
  MatX H;
};

/// Dense Jacobians of one IMEX step from `state` to its converged successor `next`.
inline StepJacobians step_jacobians(const SimState& state, const SimState& next, const Model& model,
                                    const SimParams& params, const ParamSelector& sel,
                                    bool include_direction_term = true) {
  const double h = params.h;
  const Eigen::Index n3 = state.positions.size();
  const ElasticOperators ops = assemble_operators(model.topology, model.vertex_count());
  const SpMat hs = imex_hessian(next.positions, model, ops, h, include_direction_term);
  const SymmetricSolver solver(hs, DofPartition(model.vertex_count(), model.pinned));
  const MatX m = mass_diagonal(model.masses).asDiagonal().toDenseMatrix();

  StepJacobians out;
  out.H = MatX(hs);
  MatX rx = m + (h * h) * explicit_force_jacobian(state.positions, model, params);
  MatX rv = h * m;
  MatX rt;
  if (sel.kind == ParamKind::Charges)
    rt = (h * h) * explicit_force_charge_derivative(state.positions, model, params, sel);
  else
    rt = -(h * h) * elastic_gradient_stiffness_derivative(next.positions, model, sel);
  zero_pinned_rows(rx, model.pinned);
  zero_pinned_rows(rv, model.pinned);
  zero_pinned_rows(rt, model.pinned);
  out.d_phi_dX = solver.solve_columns(rx);
  out.d_phi_dV = solver.solve_columns(rv);
  out.d_phi_d_theta = solver.solve_columns(rt);
  (void)n3;
  return out;
}

// ---------------------------------------------------------------------------
// Rollout gradients.

struct FrameTarget {
  std::size_t frame = 0;
  VecX positions;
  double weight = 1.0;
};

/// L = sum_f w_f |x_f - target_f|^2 / n.
struct LossSpec {
  std::vector<FrameTarget> targets;

  static LossSpec last_frame(std::size_t frame, VecX target) {
    LossSpec l;
    l.targets.push_back({frame, std::move(target), 1.0});
    return l;
  }

  double value(const Trajectory& traj) const {
    double v = 0.0;
    for (const FrameTarget& t : targets) {
      if (t.frame >= traj.size()) throw ConfigError("loss references frame " + std::to_string(t.frame) + " which was not recorded");
      const VecX& x = traj.states[t.frame].positions;
      if (x.size() != t.positions.size()) throw ConfigError("loss target has the wrong length");
      v += t.weight * (x - t.positions).squaredNorm() / static_cast<double>(x.size() / 3);
    }
    return v;
  }
};

struct GradientResult {
  double loss = 0.0;
  VecX gradient;
};

/// dL/dtheta by tangent propagation along a rollout recorded at every step.
inline GradientResult backprop_rollout(const Trajectory& traj, const Model& model_in, const SimParams& params,
                                       const LossSpec& loss, const ParamSelector& sel,
                                       bool include_direction_term = true) {
  if (traj.record_every != 1) throw ConfigError("backprop_rollout needs every step recorded");
  sel.validate(model_in);
  for (const FrameTarget& t : loss.targets)
    if (t.frame >= traj.size()) throw ConfigError("loss references frame " + std::to_string(t.frame) + " which was not recorded");
  if (traj.kind == IntegratorKind::Explicit) throw ConfigError("gradients are available for imex and verlet only");

  Model model = model_in;
  const double h = traj.h;
  const Eigen::Index n3 = model.vertex_count() * 3;
  const Eigen::Index p = sel.size();
  const double inv_n = 3.0 / static_cast<double>(n3);
  const VecX m = mass_diagonal(model.masses);
  const VecX inv_m = m.cwiseInverse();
  const ElasticOperators ops = assemble_operators(model.topology, model.vertex_count());
  SimParams sp = params;
  sp.h = h;

  std::map<std::size_t, std::vector<const FrameTarget*>> by_frame;
  for (const FrameTarget& t : loss.targets) by_frame[t.frame].push_back(&t);

  GradientResult res;
  res.loss = loss.value(traj);
  res.gradient = VecX::Zero(p);
  auto accumulate = [&](std::size_t f, const MatX& dx) {
    auto it = by_frame.find(f);
    if (it == by_frame.end()) return;
    for (const FrameTarget* t : it->second)
      res.gradient += (2.0 * t->weight * inv_n) * (dx.transpose() * (traj.states[f].positions - t->positions));
  };

  MatX dx = MatX::Zero(n3, p), dv = MatX::Zero(n3, p);
  auto charges_at = [&](std::size_t f) {
    if (f < traj.charges.size()) model.charges.charges = traj.charges[f];
  };

  if (traj.kind == IntegratorKind::Imex) {
    SymmetricSolver solver;
    for (std::size_t f = 0; f + 1 < traj.size(); ++f) {
      charges_at(f);
      const SimState& s0 = traj.states[f];
      const SimState& s1 = traj.states[f + 1];
      MatX rhs = m.asDiagonal() * (dx + h * dv);
      MatX pull = explicit_force_jacobian_apply(s0.positions, model, sp, dx);
      if (sel.kind == ParamKind::Charges)
        pull += explicit_force_charge_derivative(s0.positions, model, sp, sel);
      else
        pull -= elastic_gradient_stiffness_derivative(s1.positions, model, sel);
      rhs += (h * h) * pull;
      zero_pinned_rows(rhs, model.pinned);
      const SpMat hs = imex_hessian(s1.positions, model, ops, h, include_direction_term);
      if (solver.valid())
        solver.refactor(hs);
      else
        solver = SymmetricSolver(hs, DofPartition(model.vertex_count(), model.pinned));
      MatX dx1 = solver.solve_columns(rhs);
      dv = (dx1 - dx) / h;
      dx = std::move(dx1);
      accumulate(f + 1, dx);
    }
  } else {
    auto accel_tangent = [&](const VecX& x, const MatX& d) {
      MatX f = explicit_force_jacobian_apply(x, model, sp, d);
      f -= elastic_hessian(x, model.topology, ops, 0.0) * d;
      f += force_parameter_derivative(x, model, sp, sel);
      MatX a = inv_m.asDiagonal() * f;
      zero_pinned_rows(a, model.pinned);
      return a;
    };
    charges_at(0);
    MatX da = accel_tangent(traj.states[0].positions, dx);
    for (std::size_t f = 0; f + 1 < traj.size(); ++f) {
      charges_at(f);
      MatX dx1 = dx + h * dv + (0.5 * h * h) * da;
      zero_pinned_rows(dx1, model.pinned);
      MatX da1 = accel_tangent(traj.states[f + 1].positions, dx1);
      dv += (0.5 * h) * (da + da1);
      zero_pinned_rows(dv, model.pinned);
      dx = std::move(dx1);
      da = std::move(da1);
      accumulate(f + 1, dx);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Estimation.

struct OptimizerConfig {
  int max_iterations = 200;
  double step_size = 1.0;        // in scaled units
  double parameter_scale = 1.0;  // theta = scale * u; descent runs on u
  double step_growth = 1.0;      // step multiplier after an accepted step
  int max_halvings = 40;
  double loss_tolerance = 0.0;
  double gradient_tolerance = 0.0;
  double relative_change_tolerance = 0.0;  // stop when |du| <= tol * |u|
};

struct EstimationReport {
  VecX theta;
  std::vector<double> loss;
  std::vector<VecX> thetas;
  std::vector<double> gradient_norm;
  int iterations = 0;
  int rollouts = 0;
  bool converged = false;
  std::string stop_reason;
  double seconds = 0.0;
};

struct EstimationProblem {
  Model model;
  SimState initial;
  SimParams params;
  IntegratorKind kind = IntegratorKind::Imex;
  long steps = 0;
  LossSpec loss;  // frame indices refer to steps
  ParamSelector selector;
  bool include_direction_term = true;
};

/// Loss (and gradient when requested) at theta; an infinite loss marks divergence.
inline GradientResult evaluate_problem(const EstimationProblem& pb, const VecX& theta, bool with_gradient) {
  Model model = pb.model;
  pb.selector.apply(model, theta);
  RolloutOptions opt;
  opt.kind = pb.kind;
  opt.steps = pb.steps;
  GradientResult r;
  Trajectory traj;
  try {
    traj = rollout(pb.initial, model, pb.params, opt);
  } catch (const DivergenceError&) {
    r.loss = std::numeric_limits<double>::infinity();
    r.gradient = VecX::Zero(theta.size());
    return r;
  }
  if (!with_gradient) {
    r.loss = pb.loss.value(traj);
    return r;
  }
  return backprop_rollout(traj, model, pb.params, pb.loss, pb.selector, pb.include_direction_term);
}

/// Gradient descent with backtracking: a step that raises the loss (or
/// diverges) is halved and retried; accepted steps may grow the step size.
inline EstimationReport estimate_parameters(const EstimationProblem& pb, const VecX& theta0,
                                            const OptimizerConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  pb.selector.validate(pb.model);
  EstimationReport rep;
  const double scale = cfg.parameter_scale;
  VecX u = theta0 / scale;
  double step = cfg.step_size;
  GradientResult cur = evaluate_problem(pb, u * scale, true);
  ++rep.rollouts;
  rep.thetas.push_back(u * scale);
  rep.loss.push_back(cur.loss);
  rep.gradient_norm.push_back(cur.gradient.norm() * scale);
  auto finish = [&](bool ok, std::string why) {
    rep.converged = ok;
    rep.stop_reason = std::move(why);
    rep.theta = u * scale;
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
  };
  if (!std::isfinite(cur.loss)) return finish(false, "initial rollout diverged");
  for (int it = 0; it < cfg.max_iterations; ++it) {
    if (cur.loss <= cfg.loss_tolerance) return finish(true, "loss tolerance reached");
    const VecX g = cur.gradient * scale;
    if (!g.allFinite()) return finish(false, "non-finite gradient");
    if (g.norm() <= cfg.gradient_tolerance) return finish(true, "gradient tolerance reached");
    bool accepted = false;
    VecX du;
    for (int k = 0; k <= cfg.max_halvings; ++k) {
      du = -step * g;
      const GradientResult trial = evaluate_problem(pb, (u + du) * scale, false);
      ++rep.rollouts;
      if (std::isfinite(trial.loss) && trial.loss < cur.loss) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) return finish(false, "line search failed");
    u += du;
    cur = evaluate_problem(pb, u * scale, true);
    ++rep.rollouts;
    ++rep.iterations;
    rep.thetas.push_back(u * scale);
    rep.loss.push_back(cur.loss);
    rep.gradient_norm.push_back(cur.gradient.norm() * scale);
    step *= cfg.step_growth;
    if (cfg.relative_change_tolerance > 0.0 && du.norm() <= cfg.relative_change_tolerance * u.norm())
      return finish(true, "parameter change below tolerance");
  }
  if (cur.loss <= cfg.loss_tolerance) return finish(true, "loss tolerance reached");
  return finish(false, "iteration limit");
}

}  // namespace msc
