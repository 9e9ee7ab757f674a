#pragma once

// Batch commands behind the msc executable. Each throws ConfigError,
// DivergenceError or IoError; exit_code() maps those to process exit codes.

#include "msc/ddef.hpp"
#include "msc/grad.hpp"
#include "msc/scene.hpp"
#include "msc/trajectory_io.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>

namespace msc {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitDivergence = 3, kExitIo = 4 };

/// Command-line overrides layered on top of a scene file.
struct Overrides {
  std::optional<std::string> integrator;
  std::optional<std::string> forces;
  std::optional<double> h;
  std::optional<long> steps;
  std::optional<int> m;
};

inline void apply_overrides(Scene& sc, const Overrides& o) {
  if (o.integrator) sc.integrator = parse_integrator(*o.integrator);
  if (o.forces) {
    if (*o.forces != "brute" && *o.forces != "ddef") throw ConfigError("--forces must be brute or ddef");
    sc.params.ddef_enabled = *o.forces == "ddef";
  }
  if (o.h) {
    if (!(*o.h > 0.0)) throw ConfigError("--h must be > 0");
    sc.params.h = *o.h;
    sc.initial = SimState::from_positions(sc.initial.positions, sc.initial.velocities, *o.h);
  }
  if (o.steps) {
    if (*o.steps < 0) throw ConfigError("--steps must be >= 0");
    sc.steps = *o.steps;
  }
  if (o.m) sc.params.ddef_m = *o.m;
  try {
    sc.params.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

/// Copy of a scene re-timed to step h over the same duration.
inline Scene retimed(const Scene& sc, double h, IntegratorKind kind) {
  Scene out = sc;
  const double duration = static_cast<double>(sc.steps) * sc.params.h;
  out.params.h = h;
  out.integrator = kind;
  out.steps = std::lround(duration / h);
  out.record_every = 1;
  out.initial = SimState::from_positions(sc.initial.positions, sc.initial.velocities, h);
  return out;
}

inline Trajectory run_scene(const Scene& sc) {
  return rollout(sc.initial, sc.model, sc.params, rollout_options(sc));
}

inline void write_energy_csv(std::ostream& out, const Trajectory& traj, const Scene& sc) {
  out << "frame,time,kinetic,elastic,coulomb,external,total\n" << std::setprecision(17);
  const auto e = energy_series(traj, sc.model, sc.params);
  for (std::size_t k = 0; k < traj.size(); ++k)
    out << k << ',' << traj.frame_time(k) << ',' << e[k].kinetic << ',' << e[k].elastic << ',' << e[k].coulomb << ','
        << e[k].external_potential << ',' << e[k].total << '\n';
}

inline void save_energy(const std::filesystem::path& path, const Trajectory& traj, const Scene& sc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_energy_csv(out, traj, sc);
}

inline std::filesystem::path energy_path(const std::filesystem::path& output) {
  std::filesystem::path p = output;
  p.replace_extension(".energy.csv");
  return p;
}

/// simulate: rollout to a trajectory file plus an energy CSV next to it.
/// A divergent run still writes the frames recorded before the failure.
inline void cmd_simulate(const std::filesystem::path& config, const std::filesystem::path& output,
                         const Overrides& o, std::ostream& log) {
  Scene sc = load_scene(config);
  for (const std::string& w : sc.warnings) log << "warning: " << w << '\n';
  apply_overrides(sc, o);
  const auto t0 = std::chrono::steady_clock::now();
  Trajectory traj;
  try {
    traj = run_scene(sc);
  } catch (const RolloutDivergence& e) {
    save_trajectory(output, e.partial());
    save_energy(energy_path(output), e.partial(), sc);
    log << "diverged at step " << e.step() << " (" << to_string(sc.integrator) << ", h=" << sc.params.h << "); wrote "
        << e.partial().size() << " frames to " << output.string() << '\n';
    throw;
  }
  save_trajectory(output, traj);
  save_energy(energy_path(output), traj, sc);
  const auto e = energy_series(traj, sc.model, sc.params);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log << sc.name << ": " << to_string(sc.integrator) << ", " << (sc.params.ddef_enabled ? "ddef" : "brute")
      << ", n=" << sc.vertex_count() << ", h=" << sc.params.h << ", steps=" << sc.steps << ", frames=" << traj.size()
      << '\n'
      << "energy: start " << e.front().total << " J, end " << e.back().total << " J\n"
      << "wrote " << output.string() << " and " << energy_path(output).string() << " in " << std::fixed
      << std::setprecision(2) << secs << " s\n"
      << std::defaultfloat;
}

struct ValidateOptions {
  std::optional<std::filesystem::path> reference;  // defaults to Verlet at reference_h
  double reference_h = 0.01;
};

/// Error of a scene's rollout against a reference; a divergent run yields an infinite error from that time on.
inline ErrorSeries validate_scene(const Scene& sc, const Scene& ref) {
  const Trajectory ref_traj = run_scene(ref);
  Trajectory traj;
  bool diverged = false;
  try {
    traj = run_scene(sc);
  } catch (const RolloutDivergence& e) {
    traj = e.partial();
    diverged = true;
  }
  ErrorSeries s = relative_energy_error(traj, ref_traj, sc.model, sc.params);
  if (diverged) {
    const double t_fail = traj.size() ? traj.states.back().time : 0.0;
    for (std::size_t k = 0; k < ref_traj.size(); ++k)
      if (ref_traj.frame_time(k) > t_fail + 1e-9) {
        s.time.push_back(ref_traj.frame_time(k));
        s.error.push_back(std::numeric_limits<double>::infinity());
        break;
      }
    s = summarize(std::move(s));
  }
  return s;
}

inline Scene reference_scene(const Scene& sc, const ValidateOptions& vo) {
  if (vo.reference) {
    Scene ref = load_scene(*vo.reference);
    ref.record_every = 1;
    return ref;
  }
  return retimed(sc, vo.reference_h, IntegratorKind::Verlet);
}

inline void write_error_csv(std::ostream& out, const ErrorSeries& s) {
  out << "time,relative_energy_error\n" << std::setprecision(17);
  for (std::size_t k = 0; k < s.time.size(); ++k) out << s.time[k] << ',' << s.error[k] << '\n';
}

/// validate: relative energy error series against a reference run.
inline ErrorSeries cmd_validate(const std::filesystem::path& config, const ValidateOptions& vo, const Overrides& o,
                                const std::filesystem::path& output, std::ostream& log) {
  Scene sc = load_scene(config);
  apply_overrides(sc, o);
  sc.record_every = 1;
  const Scene ref = reference_scene(sc, vo);
  const ErrorSeries s = validate_scene(sc, ref);
  std::ofstream out(output);
  if (!out) throw IoError("cannot open " + output.string() + " for writing");
  write_error_csv(out, s);
  log << sc.name << ": " << to_string(sc.integrator) << " h=" << sc.params.h << " vs " << to_string(ref.integrator)
      << " h=" << ref.params.h << '\n'
      << "relative energy error: mean " << s.mean << ", std " << s.stddev << ", max " << s.max << " over "
      << s.error.size() << " shared frames\n";
  return s;
}

struct Range {
  double lo = 0.0, hi = 0.0;
  int count = 1;

  double at(int i) const { return count == 1 ? lo : lo + (hi - lo) * i / (count - 1); }

  /// "lo:hi:count" or a single value.
  static Range parse(const std::string& s) {
    Range r;
    std::stringstream ss(s);
    std::string a, b, c;
    std::getline(ss, a, ':');
    try {
      r.lo = std::stod(a);
      if (std::getline(ss, b, ':')) {
        r.hi = std::stod(b);
        if (!std::getline(ss, c, ':')) throw ConfigError("");
        r.count = std::stoi(c);
      } else {
        r.hi = r.lo;
      }
    } catch (const std::exception&) {
      throw ConfigError("range '" + s + "' must be lo:hi:count or a single value");
    }
    if (r.count < 1) throw ConfigError("range '" + s + "' needs count >= 1");
    return r;
  }
};

struct SweepCell {
  double k = 0.0, q_uC = 0.0, error = 0.0;
};

/// Scene with every spring at k and every vertex at q.
inline Scene with_uniform_parameters(Scene sc, double k, double q) {
  for (Spring& s : sc.model.topology.springs) s.k = k;
  sc.model.charges.charges.setConstant(q);
  sc.tracks.clear();
  return sc;
}

/// Error at a given frame of the scene's integrator against Verlet at reference_h.
inline double frame_error(const Scene& sc, long frame, double reference_h) {
  Scene run = sc;
  run.steps = frame;
  run.record_every = 1;
  const Scene ref = retimed(run, reference_h, IntegratorKind::Verlet);
  const ErrorSeries s = validate_scene(run, ref);
  if (s.time.empty()) return std::numeric_limits<double>::infinity();
  const double t = static_cast<double>(frame) * run.params.h;
  if (std::abs(s.time.back() - t) > 1e-9 * std::max(1.0, t)) return std::numeric_limits<double>::infinity();
  return s.error.back();
}

/// sweep: frame error over a (k, q) grid.
inline std::vector<SweepCell> sweep_grid(const Scene& sc, const Range& k, const Range& q_uC, long frame,
                                         double reference_h) {
  std::vector<SweepCell> cells(static_cast<std::size_t>(k.count * q_uC.count));
  parallel_for_index(
      cells.size(),
      [&](std::size_t c) {
        const int i = static_cast<int>(c) / q_uC.count, j = static_cast<int>(c) % q_uC.count;
        SweepCell& cell = cells[c];
        cell.k = k.at(i);
        cell.q_uC = q_uC.at(j);
        cell.error = frame_error(with_uniform_parameters(sc, cell.k, cell.q_uC * kMicroCoulomb), frame, reference_h);
      },
      1);
  return cells;
}

inline std::vector<SweepCell> cmd_sweep(const std::filesystem::path& config, const Range& k, const Range& q_uC,
                                        long frame, double reference_h, const Overrides& o,
                                        const std::filesystem::path& output, std::ostream& log) {
  Scene sc = load_scene(config);
  apply_overrides(sc, o);
  if (frame < 0) throw ConfigError("--frame must be >= 0");
  const auto cells = sweep_grid(sc, k, q_uC, frame, reference_h);
  std::ofstream out(output);
  if (!out) throw IoError("cannot open " + output.string() + " for writing");
  out << "k,q_uC,relative_energy_error\n" << std::setprecision(17);
  const SweepCell* worst = &cells.front();
  for (const SweepCell& c : cells) {
    out << c.k << ',' << c.q_uC << ',' << c.error << '\n';
    if (!(c.error <= worst->error)) worst = &c;
  }
  log << sc.name << ": " << cells.size() << " cells, " << to_string(sc.integrator) << " h=" << sc.params.h
      << " frame " << frame << " vs verlet h=" << reference_h << '\n'
      << "max error " << worst->error << " at k=" << worst->k << " N/m, q=" << worst->q_uC << " uC\n";
  return cells;
}

struct EstimateOptions {
  std::string param = "charges";
  std::string group = "all";
  std::optional<double> guess;  // SI (C or N/m)
  std::optional<std::filesystem::path> target_trajectory;
  std::optional<std::filesystem::path> target_config;
  bool include_direction_term = true;
  OptimizerConfig optimizer;
};

/// Estimation problem whose loss compares the final positions with a target recorded at time T.
inline EstimationProblem make_estimation_problem(const Scene& sc, const SimState& target, const ParamSelector& sel,
                                                 bool include_direction_term) {
  EstimationProblem pb;
  pb.model = sc.model;
  pb.initial = sc.initial;
  pb.params = sc.params;
  pb.kind = sc.integrator;
  pb.steps = std::lround(target.time / sc.params.h);
  if (pb.steps < 1) throw ConfigError("target time is shorter than one step");
  if (std::abs(static_cast<double>(pb.steps) * sc.params.h - target.time) > 1e-6 * std::max(1.0, target.time))
    throw ConfigError("target time is not a multiple of h");
  if (target.positions.size() != sc.initial.positions.size())
    throw ConfigError("target has " + std::to_string(target.vertex_count()) + " vertices, scene has " +
                      std::to_string(sc.vertex_count()));
  pb.loss = LossSpec::last_frame(static_cast<std::size_t>(pb.steps), target.positions);
  pb.selector = sel;
  pb.include_direction_term = include_direction_term;
  return pb;
}

inline EstimationReport cmd_estimate(const std::filesystem::path& config, const EstimateOptions& eo,
                                     const Overrides& o, std::ostream& log) {
  Scene sc = load_scene(config);
  apply_overrides(sc, o);
  SimState target;
  if (eo.target_trajectory) {
    const Trajectory t = load_trajectory(*eo.target_trajectory);
    if (t.size() == 0) throw ConfigError("target trajectory has no frames");
    target = t.states.back();
  } else if (eo.target_config) {
    const Trajectory t = run_scene(load_scene(*eo.target_config));
    target = t.states.back();
  } else {
    throw ConfigError("estimate needs --target or --target-config");
  }
  const ParamKind kind = parse_param_kind(eo.param);
  ParamSelector sel;
  if (kind == ParamKind::Charges) {
    sel = ParamSelector::single(kind, sc.group(eo.group), eo.group);
  } else {
    if (eo.group != "all") throw ConfigError("spring parameters support only --group all");
    sel = ParamSelector::all(kind, sc.model);
  }
  EstimationProblem pb = make_estimation_problem(sc, target, sel, eo.include_direction_term);
  VecX theta0 = sel.values(sc.model);
  if (eo.guess) theta0.setConstant(*eo.guess);
  const EstimationReport rep = estimate_parameters(pb, theta0, eo.optimizer);
  const double unit = kind == ParamKind::Charges ? kMicroCoulomb : 1.0;
  const char* unit_name = kind == ParamKind::Charges ? " uC" : " N/m";
  log << "iteration,loss,value\n" << std::setprecision(10);
  for (std::size_t i = 0; i < rep.loss.size(); ++i) log << i << ',' << rep.loss[i] << ',' << rep.thetas[i][0] / unit << '\n';
  log << "estimate: " << rep.theta[0] / unit << unit_name << " after " << rep.iterations << " iterations ("
      << rep.rollouts << " rollouts, " << rep.seconds << " s); " << rep.stop_reason << '\n';
  return rep;
}

struct BenchRow {
  int n = 0, m = 0;
  double brute_ms = 0.0, ddef_ms = 0.0, mean_error = 0.0;
};

/// Brute-force vs DDEF field on seeded random clouds with uniform charge.
inline std::vector<BenchRow> bench_ddef(const std::vector<int>& sizes, const std::vector<int>& ms, std::uint64_t seed) {
  using clock = std::chrono::steady_clock;
  std::vector<BenchRow> rows;
  for (int n : sizes) {
    const VecX x = gen::cloud(n, 1.0, seed).stacked_positions();
    const ChargeSet q = ChargeSet::uniform(n, kMicroCoulomb);
    auto t0 = clock::now();
    const VecX exact = brute_field(x, q, 0.0, true);
    const double brute_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    for (int m : ms) {
      t0 = clock::now();
      const VecX approx = ddef_field(x, q, m);
      BenchRow r;
      r.n = n;
      r.m = m;
      r.ddef_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
      r.brute_ms = brute_ms;
      r.mean_error = mean_of(relative_field_errors(approx, exact));
      rows.push_back(r);
    }
  }
  return rows;
}

inline void cmd_bench_ddef(const std::vector<int>& sizes, const std::vector<int>& ms, std::uint64_t seed,
                           std::ostream& out) {
  for (int n : sizes)
    if (n < 2) throw ConfigError("--sizes entries must be >= 2");
  for (int m : ms)
    if (m < 4) throw ConfigError("--m entries must be >= 4");
  out << "n,m,brute_ms,ddef_ms,mean_relative_error\n";
  for (const BenchRow& r : bench_ddef(sizes, ms, seed))
    out << r.n << ',' << r.m << ',' << std::fixed << std::setprecision(3) << r.brute_ms << ',' << r.ddef_ms << ','
        << std::setprecision(5) << r.mean_error << std::defaultfloat << '\n';
}

}  // namespace msc
