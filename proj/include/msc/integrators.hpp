#pragma once

// Time stepping. The IMEX step treats the spring potential implicitly with the
// local/global solver and the Coulomb force explicitly at X_t. Velocity Verlet
// and forward Euler use the full force explicitly and serve as baselines.

#include "msc/coulomb.hpp"
#include "msc/ddef.hpp"
#include "msc/elastic.hpp"

#include <functional>
#include <optional>
#include <string>

namespace msc {

enum class IntegratorKind { Imex, Verlet, Explicit };

inline IntegratorKind parse_integrator(const std::string& s) {
  if (s == "imex") return IntegratorKind::Imex;
  if (s == "verlet") return IntegratorKind::Verlet;
  if (s == "explicit") return IntegratorKind::Explicit;
  throw ConfigError("unknown integrator '" + s + "' (expected imex, verlet or explicit)");
}

inline std::string to_string(IntegratorKind k) {
  switch (k) {
    case IntegratorKind::Imex: return "imex";
    case IntegratorKind::Verlet: return "verlet";
    default: return "explicit";
  }
}

struct EnergyBreakdown {
  double kinetic = 0.0;
  double elastic = 0.0;
  double coulomb = 0.0;
  double external_potential = 0.0;
  double total = 0.0;
};

/// Potential of the conservative external terms: constant force, gravity and
/// fixed external charges. A user field has no potential and is left out.
inline double external_potential(const VecX& x, const Model& model, const SimParams& params) {
  const Eigen::Index n = model.vertex_count();
  double u = 0.0;
  if (model.forcing.constant_force.size() == x.size()) u -= model.forcing.constant_force.dot(x);
  const double kc = model.charges.coulomb_constant;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 xi = x.segment<3>(3 * i);
    u -= model.masses.masses[i] * params.gravity.dot(xi);
    const double q = model.charges.charges[i];
    if (q == 0.0) continue;
    for (const ExternalCharge& e : model.forcing.external_charges) {
      const double d = std::max((xi - e.position).norm(), params.softening_epsilon);
      if (d > 0.0) u += kc * q * e.charge / d;
    }
  }
  return u;
}

inline EnergyBreakdown total_energy(const SimState& state, const Model& model, const SimParams& params) {
  EnergyBreakdown e;
  const VecX m = mass_diagonal(model.masses);
  e.kinetic = 0.5 * state.velocities.dot(m.cwiseProduct(state.velocities));
  e.elastic = elastic_energy(state.positions, model.topology);
  e.coulomb = coulomb_energy(state.positions, model.charges, params.softening_epsilon);
  e.external_potential = external_potential(state.positions, model, params);
  e.total = e.kinetic + e.elastic + e.coulomb + e.external_potential;
  return e;
}

/// Coulomb forces through the selected backend.
class CoulombBackend {
 public:
  VecX forces(const VecX& x, const ChargeSet& charges, const SimParams& params) {
    if (charges.charges.isZero(0.0)) return VecX::Zero(x.size());
    if (params.ddef_enabled) return ddef_.forces(x, charges, params);
    return pairwise_forces_brute(x, charges, params.softening_epsilon, true);
  }
  void reset() { ddef_.reset(); }

 private:
  DdefEngine ddef_;
};

/// One IMEX step given the Coulomb forces Q_t at X_t.
inline SimState imex_step(const SimState& state, const Model& model, const ElasticOperators& ops,
                          const PrefactoredSystem& prefac, const SimParams& params, const VecX& coulomb_forces) {
  const double h = params.h;
  const VecX m = mass_diagonal(model.masses);
  const VecX y = 2.0 * state.positions - state.prev_positions;
  const VecX explicit_force = coulomb_forces + net_external_force(state, model, params);
  const VecX base = m.cwiseProduct(y) + (h * h) * explicit_force;
  VecX x = y;
  for (const int v : model.pinned) x.segment<3>(3 * v) = state.positions.segment<3>(3 * v);
  for (int it = 0; it < params.local_global_iterations; ++it) {
    const SpringDirections d = local_step(x, model.topology, params.softening_epsilon);
    VecX next = prefac.solve(base + (h * h) * (ops.J * d.d), &state.positions);
    const double change = (next - x).lpNorm<Eigen::Infinity>();
    x = std::move(next);
    if (!x.allFinite() || (params.local_global_tolerance > 0.0 && change <= params.local_global_tolerance)) break;
  }
  SimState out;
  out.prev_positions = state.positions;
  out.positions = std::move(x);
  out.velocities = (out.positions - state.positions) / h;
  out.time = state.time + h;
  return out;
}

/// Total force used by the explicit integrators.
inline VecX explicit_total_force(const VecX& x, const Model& model, const SimParams& params, const VecX& coulomb) {
  SimState s;
  s.positions = x;
  return coulomb - elastic_gradient(x, model.topology) + net_external_force(s, model, params);
}

inline void zero_pinned(VecX& v, const std::vector<int>& pinned) {
  for (const int p : pinned) v.segment<3>(3 * p).setZero();
}

/// Velocity Verlet: X_{t+1} = X_t + h V_t + h^2/2 a_t, V_{t+1} = V_t + h/2 (a_t + a_{t+1}).
/// Positions coincide with position Verlet X_{t+1} = 2X_t - X_{t-1} + h^2 a_t.
/// `force_at` evaluates the total force at a configuration.
inline SimState verlet_step(const SimState& state, const Model& model, const SimParams& params, const VecX& force_now,
                            const std::function<VecX(const VecX&)>& force_at, VecX* force_next = nullptr) {
  const double h = params.h;
  const VecX inv_m = mass_diagonal(model.masses).cwiseInverse();
  VecX a0 = inv_m.cwiseProduct(force_now);
  zero_pinned(a0, model.pinned);
  SimState out;
  out.prev_positions = state.positions;
  out.positions = state.positions + h * state.velocities + (0.5 * h * h) * a0;
  VecX f1 = force_at(out.positions);
  VecX a1 = inv_m.cwiseProduct(f1);
  zero_pinned(a1, model.pinned);
  out.velocities = state.velocities + (0.5 * h) * (a0 + a1);
  zero_pinned(out.velocities, model.pinned);
  out.time = state.time + h;
  if (force_next) *force_next = std::move(f1);
  return out;
}

/// Forward Euler on every force (the explicit-explicit baseline).
inline SimState explicit_step(const SimState& state, const Model& model, const SimParams& params,
                              const VecX& force_now) {
  const double h = params.h;
  VecX a = mass_diagonal(model.masses).cwiseInverse().cwiseProduct(force_now);
  zero_pinned(a, model.pinned);
  SimState out;
  out.prev_positions = state.positions;
  out.positions = state.positions + h * state.velocities;
  out.velocities = state.velocities + h * a;
  zero_pinned(out.velocities, model.pinned);
  out.time = state.time + h;
  return out;
}

using ChargeSchedule = std::function<VecX(double)>;

/// Owns one running simulation. Shared by batch rollouts and the live service
/// so both follow exactly the same arithmetic.
class Simulator {
 public:
  Simulator(Model model, SimParams params, IntegratorKind kind, SimState initial)
      : model_(std::move(model)), params_(params), kind_(kind), state_(std::move(initial)) {
    params_.validate();
    state_.validate();
    if (state_.vertex_count() != model_.vertex_count())
      throw ConfigError("initial state and model have different vertex counts");
    if (model_.charges.charges.size() != model_.vertex_count())
      throw ConfigError("charge count does not match vertex count");
    rebuild_operators();
    set_runaway_bound();
  }

  /// Positions farther than this multiple of the initial extent count as divergence.
  static constexpr double kRunawayFactor = 1e6;

  const SimState& state() const { return state_; }
  const Model& model() const { return model_; }
  const SimParams& params() const { return params_; }
  IntegratorKind kind() const { return kind_; }
  long step_index() const { return step_; }
  const ElasticOperators& operators() const { return ops_; }
  const PrefactoredSystem& system() const { return prefac_; }

  void set_charge_schedule(ChargeSchedule s) {
    schedule_ = std::move(s);
    force_cache_.reset();
  }

  void set_charges(const VecX& q) {
    if (q.size() != model_.vertex_count()) throw ConfigError("charge vector has the wrong length");
    model_.charges.charges = q;
    force_cache_.reset();
  }

  /// Mutable access to forcing terms (external charges, field). Invalidates caches.
  ExternalForcing& forcing() {
    force_cache_.reset();
    return model_.forcing;
  }

  /// Changes h and refactors; the history is rebuilt from the current velocity.
  void set_timestep(double h) {
    SimParams p = params_;
    p.h = h;
    p.validate();
    params_ = p;
    state_.prev_positions = state_.positions - h * state_.velocities;
    prefac_ = prefactor(mass_diagonal(model_.masses), ops_.L, params_.h, model_.pinned);
  }

  void reset(SimState s, double time = 0.0) {
    s.validate();
    if (s.vertex_count() != model_.vertex_count()) throw ConfigError("reset state has the wrong vertex count");
    state_ = std::move(s);
    state_.time = time;
    step_ = 0;
    force_cache_.reset();
    backend_.reset();
    set_runaway_bound();
  }

  /// Charges the next step will use (after the schedule is applied).
  void apply_schedule() {
    if (!schedule_) return;
    VecX q = schedule_(state_.time);
    if (q.size() != model_.vertex_count()) throw ConfigError("charge schedule returned the wrong length");
    if (q != model_.charges.charges) {
      model_.charges.charges = std::move(q);
      force_cache_.reset();
    }
  }

  /// Advances one step. The state is left untouched when the step diverges.
  const SimState& step() {
    apply_schedule();
    SimState next;
    VecX next_force;
    switch (kind_) {
      case IntegratorKind::Imex: {
        const VecX q = backend_.forces(state_.positions, model_.charges, params_);
        next = imex_step(state_, model_, ops_, prefac_, params_, q);
        break;
      }
      case IntegratorKind::Verlet: {
        const VecX f0 = force_cache_ ? *force_cache_ : total_force(state_.positions);
        next = verlet_step(state_, model_, params_, f0, [this](const VecX& x) { return total_force(x); },
                           &next_force);
        break;
      }
      case IntegratorKind::Explicit:
        next = explicit_step(state_, model_, params_, total_force(state_.positions));
        break;
    }
    if (!next.finite()) throw DivergenceError(step_ + 1, "non-finite state");
    if ((next.positions - centre_).lpNorm<Eigen::Infinity>() > runaway_bound_)
      throw DivergenceError(step_ + 1, "runaway state (positions beyond 1e6 times the initial extent)");
    state_ = std::move(next);
    ++step_;
    if (kind_ == IntegratorKind::Verlet)
      force_cache_ = std::move(next_force);
    else
      force_cache_.reset();
    return state_;
  }

  VecX total_force(const VecX& x) {
    return explicit_total_force(x, model_, params_, backend_.forces(x, model_.charges, params_));
  }

 private:
  void set_runaway_bound() {
    const Eigen::Index n = state_.vertex_count();
    Vec3 c = Vec3::Zero();
    for (Eigen::Index i = 0; i < n; ++i) c += state_.positions.segment<3>(3 * i) / static_cast<double>(n);
    centre_ = c.replicate(n, 1);
    const double extent = n > 0 ? (state_.positions - centre_).lpNorm<Eigen::Infinity>() : 0.0;
    runaway_bound_ = kRunawayFactor * std::max(extent, 1.0);
  }

  void rebuild_operators() {
    ops_ = assemble_operators(model_.topology, model_.vertex_count());
    prefac_ = prefactor(mass_diagonal(model_.masses), ops_.L, params_.h, model_.pinned);
  }

  Model model_;
  SimParams params_;
  IntegratorKind kind_;
  SimState state_;
  ElasticOperators ops_;
  PrefactoredSystem prefac_;
  CoulombBackend backend_;
  ChargeSchedule schedule_;
  std::optional<VecX> force_cache_;
  VecX centre_;
  double runaway_bound_ = 0.0;
  long step_ = 0;
};

struct Trajectory {
  std::vector<SimState> states;
  std::vector<VecX> charges;  // charges in effect at each recorded frame
  double h = 0.0;
  int record_every = 1;
  IntegratorKind kind = IntegratorKind::Imex;

  std::size_t size() const { return states.size(); }
  double frame_time(std::size_t k) const { return states[k].time; }
};

/// Divergence during a rollout; carries the frames recorded before it.
class RolloutDivergence : public DivergenceError {
 public:
  RolloutDivergence(long step, const std::string& what, Trajectory partial)
      : DivergenceError(step, what), partial_(std::move(partial)) {}
  const Trajectory& partial() const { return partial_; }

 private:
  Trajectory partial_;
};

struct RolloutOptions {
  IntegratorKind kind = IntegratorKind::Imex;
  long steps = 0;
  int record_every = 1;
  ChargeSchedule schedule;
};

inline void record_frame(Trajectory& traj, const Simulator& sim) {
  traj.states.push_back(sim.state());
  traj.charges.push_back(sim.model().charges.charges);
}

inline Trajectory rollout(const SimState& initial, const Model& model, const SimParams& params,
                          const RolloutOptions& opt) {
  if (opt.steps < 0) throw ConfigError("steps must be >= 0");
  if (opt.record_every < 1) throw ConfigError("record_every must be >= 1");
  Simulator sim(model, params, opt.kind, initial);
  if (opt.schedule) sim.set_charge_schedule(opt.schedule);
  sim.apply_schedule();
  Trajectory traj;
  traj.h = params.h;
  traj.record_every = opt.record_every;
  traj.kind = opt.kind;
  record_frame(traj, sim);
  for (long s = 1; s <= opt.steps; ++s) {
    try {
      sim.step();
    } catch (const DivergenceError& e) {
      throw RolloutDivergence(s, e.reason(), std::move(traj));
    }
    if (s % opt.record_every == 0 || s == opt.steps) {
      sim.apply_schedule();
      record_frame(traj, sim);
    }
  }
  return traj;
}

inline std::vector<EnergyBreakdown> energy_series(const Trajectory& traj, Model model, const SimParams& params) {
  std::vector<EnergyBreakdown> out;
  out.reserve(traj.size());
  for (std::size_t k = 0; k < traj.size(); ++k) {
    if (k < traj.charges.size()) model.charges.charges = traj.charges[k];
    out.push_back(total_energy(traj.states[k], model, params));
  }
  return out;
}

struct ErrorSeries {
  std::vector<double> time;
  std::vector<double> error;
  double mean = 0.0;
  double stddev = 0.0;
  double max = 0.0;
};

inline ErrorSeries summarize(ErrorSeries s) {
  if (s.error.empty()) return s;
  double sum = 0.0;
  s.max = 0.0;
  for (double e : s.error) {
    sum += e;
    s.max = std::max(s.max, std::isfinite(e) ? e : std::numeric_limits<double>::infinity());
  }
  s.mean = sum / static_cast<double>(s.error.size());
  double var = 0.0;
  for (double e : s.error) var += (e - s.mean) * (e - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(s.error.size()));
  return s;
}

/// |E(t) - E_ref(t)| / max(|E_ref(t)|, 1e-12 |E_ref(0)|) at timestamps both share.
inline ErrorSeries relative_energy_error(const std::vector<double>& times, const std::vector<double>& energy,
                                         const std::vector<double>& ref_times, const std::vector<double>& ref_energy) {
  if (times.size() != energy.size() || ref_times.size() != ref_energy.size() || ref_times.empty())
    throw ConfigError("relative_energy_error: malformed series");
  const double floor = 1e-12 * std::abs(ref_energy.front());
  ErrorSeries s;
  std::size_t r = 0;
  for (std::size_t k = 0; k < times.size(); ++k) {
    const double t = times[k];
    const double tol = 1e-9 * std::max(1.0, std::abs(t));
    while (r < ref_times.size() && ref_times[r] < t - tol) ++r;
    if (r == ref_times.size()) break;
    if (std::abs(ref_times[r] - t) > tol) continue;
    const double denom = std::max(std::abs(ref_energy[r]), floor);
    const double diff = std::abs(energy[k] - ref_energy[r]);
    s.time.push_back(t);
    s.error.push_back(denom > 0.0 ? diff / denom : (diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity()));
  }
  return summarize(std::move(s));
}

inline ErrorSeries relative_energy_error(const Trajectory& traj, const Trajectory& ref, const Model& model,
                                         const SimParams& params) {
  if (traj.size() && ref.size() && traj.states[0].positions.size() != ref.states[0].positions.size())
    throw ConfigError("relative_energy_error: trajectories come from different scenes");
  auto pick = [&](const Trajectory& t, std::vector<double>& times, std::vector<double>& e) {
    const auto series = energy_series(t, model, params);
    for (std::size_t k = 0; k < t.size(); ++k) {
      times.push_back(t.frame_time(k));
      e.push_back(series[k].total);
    }
  };
  std::vector<double> t0, e0, t1, e1;
  pick(traj, t0, e0);
  pick(ref, t1, e1);
  return relative_energy_error(t0, e0, t1, e1);
}

}  // namespace msc
