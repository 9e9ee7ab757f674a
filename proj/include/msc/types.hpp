#pragma once

// Canonical value types shared by every part of the engine: state, masses,
// spring topology, charges, external forcing and simulation parameters.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace msc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

inline constexpr double kCoulombConstant = 8.9875517923e9;  // N m^2 / C^2
inline constexpr double kMicroCoulomb = 1e-6;

// ---------------------------------------------------------------------------
// Errors. Each category maps onto one CLI exit code.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent scene/config input (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A step produced non-finite values (exit code 3).
class DivergenceError : public Error {
 public:
  DivergenceError(long step, const std::string& what)
      : Error("diverged at step " + std::to_string(step) + ": " + what), step_(step), reason_(what) {}
  long step() const noexcept { return step_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  long step_;
  std::string reason_;
};

/// File or socket failure (exit code 4).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Linear system could not be factored.
class IllConditionedError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------

inline Vec3 block3(const VecX& v, Eigen::Index i) { return v.segment<3>(3 * i); }

inline bool all_finite(const VecX& v) { return v.allFinite(); }

/// Positions, velocities and previous positions of n point masses.
struct SimState {
  VecX positions;
  VecX velocities;
  VecX prev_positions;
  double time = 0.0;

  SimState() = default;

  /// State at rest-consistent history: prev = x - h v.
  static SimState from_positions(VecX x, VecX v, double h) {
    SimState s;
    s.prev_positions = x - h * v;
    s.positions = std::move(x);
    s.velocities = std::move(v);
    return s;
  }

  static SimState at_rest(VecX x) {
    VecX v = VecX::Zero(x.size());
    return from_positions(std::move(x), std::move(v), 0.0);
  }

  Eigen::Index vertex_count() const { return positions.size() / 3; }

  void validate() const {
    if (positions.size() == 0 || positions.size() % 3 != 0)
      throw std::invalid_argument("SimState: positions must have length 3n, n >= 1");
    if (velocities.size() != positions.size() || prev_positions.size() != positions.size())
      throw std::invalid_argument("SimState: positions/velocities/prev_positions length mismatch");
  }

  bool finite() const {
    return positions.allFinite() && velocities.allFinite() && prev_positions.allFinite();
  }
};

struct MassModel {
  VecX masses;  // per vertex, kg

  static MassModel uniform(Eigen::Index n, double m = 1.0) { return {VecX::Constant(n, m)}; }

  void validate() const {
    for (Eigen::Index i = 0; i < masses.size(); ++i)
      if (!(masses[i] > 0.0) || !std::isfinite(masses[i]))
        throw std::invalid_argument("MassModel: mass of vertex " + std::to_string(i) +
                                    " must be positive and finite");
  }
};

struct Spring {
  int i = 0;
  int j = 0;
  double k = 0.0;            // N/m
  double rest_length = 0.0;  // m
};

struct SpringTopology {
  std::vector<Spring> springs;
  int vertex_count = 0;

  std::size_t size() const { return springs.size(); }

  void validate() const;
};

struct ChargeSet {
  VecX charges;  // C
  double coulomb_constant = kCoulombConstant;

  static ChargeSet uniform(Eigen::Index n, double q, double kc = kCoulombConstant) {
    return {VecX::Constant(n, q), kc};
  }

  void validate() const {
    if (!(coulomb_constant > 0.0))
      throw std::invalid_argument("ChargeSet: coulomb_constant must be positive");
    if (!charges.allFinite()) throw std::invalid_argument("ChargeSet: charges must be finite");
  }
};

enum class ForceBackend { Brute, Ddef };

struct SimParams {
  double h = 0.01;
  int local_global_iterations = 1;
  // When positive, local/global alternation repeats until the max-norm update
  // drops below this value (capped at local_global_iterations).
  double local_global_tolerance = 0.0;
  bool ddef_enabled = false;
  int ddef_m = 1000;
  int reuse_grid_frames = 1;
  bool ddef_overlap_correction = true;
  double softening_epsilon = 1e-6;
  Vec3 gravity = Vec3::Zero();

  ForceBackend backend() const { return ddef_enabled ? ForceBackend::Ddef : ForceBackend::Brute; }

  void validate() const {
    if (!(h > 0.0) || !std::isfinite(h)) throw std::invalid_argument("SimParams: h must be > 0");
    if (local_global_iterations < 1)
      throw std::invalid_argument("SimParams: local_global_iterations must be >= 1");
    if (ddef_m < 8) throw std::invalid_argument("SimParams: ddef_m must be >= 8");
    if (!(softening_epsilon >= 0.0))
      throw std::invalid_argument("SimParams: softening_epsilon must be >= 0");
    if (reuse_grid_frames < 1) throw std::invalid_argument("SimParams: reuse_grid_frames must be >= 1");
  }
};

struct ExternalCharge {
  Vec3 position = Vec3::Zero();
  double charge = 0.0;  // C
  int id = 0;
};

using VectorField = std::function<Vec3(const Vec3&)>;

struct ExternalForcing {
  VecX constant_force;                        // 3n, empty means zero
  VectorField field;                          // E_el, N/C; empty means none
  std::string field_expression[3];            // source text when parsed from config
  std::vector<ExternalCharge> external_charges;

  bool has_field() const { return static_cast<bool>(field); }
};

/// Everything that defines the physical system apart from its state.
struct Model {
  SpringTopology topology;
  MassModel masses;
  ChargeSet charges;
  ExternalForcing forcing;
  std::vector<int> pinned;  // vertices held fixed

  Eigen::Index vertex_count() const { return masses.masses.size(); }
};

// ---------------------------------------------------------------------------

inline void SpringTopology::validate() const {
  if (vertex_count < 1) throw std::invalid_argument("SpringTopology: vertex_count must be >= 1");
  std::vector<std::pair<int, int>> keys;
  keys.reserve(springs.size());
  for (std::size_t s = 0; s < springs.size(); ++s) {
    const Spring& sp = springs[s];
    const std::string tag = "SpringTopology: spring " + std::to_string(s);
    if (sp.i == sp.j) throw std::invalid_argument(tag + " connects a vertex to itself");
    if (sp.i < 0 || sp.j < 0 || sp.i >= vertex_count || sp.j >= vertex_count)
      throw std::invalid_argument(tag + " has an out-of-range vertex index");
    if (!(sp.k > 0.0)) throw std::invalid_argument(tag + " needs k > 0");
    if (!(sp.rest_length >= 0.0)) throw std::invalid_argument(tag + " needs rest_length >= 0");
    keys.emplace_back(std::min(sp.i, sp.j), std::max(sp.i, sp.j));
  }
  std::sort(keys.begin(), keys.end());
  if (std::adjacent_find(keys.begin(), keys.end()) != keys.end())
    throw std::invalid_argument("SpringTopology: duplicate spring");
}

/// Diagonal 3n x 3n mass operator.
inline SpMat assemble_mass_matrix(const MassModel& masses, Eigen::Index n) {
  if (masses.masses.size() != n)
    throw std::invalid_argument("assemble_mass_matrix: mass count does not match n");
  masses.validate();
  SpMat m(3 * n, 3 * n);
  std::vector<Triplet> t;
  t.reserve(3 * n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) t.emplace_back(3 * i + d, 3 * i + d, masses.masses[i]);
  m.setFromTriplets(t.begin(), t.end());
  return m;
}

/// Masses replicated per coordinate.
inline VecX mass_diagonal(const MassModel& masses) {
  VecX d(3 * masses.masses.size());
  for (Eigen::Index i = 0; i < masses.masses.size(); ++i) d.segment<3>(3 * i).setConstant(masses.masses[i]);
  return d;
}

/// Coulomb kernel (x - y) / max(|x - y|, eps)^3.
inline Vec3 coulomb_kernel(const Vec3& x, const Vec3& y, double eps) {
  const Vec3 r = x - y;
  const double d = std::max(r.norm(), eps);
  if (d == 0.0) return Vec3::Zero();
  return r / (d * d * d);
}

/// F_ext + q_i E(x_i) + sum_e k q_i q_e (x_i - x_e)/|x_i - x_e|^3 + m_i g.
inline VecX net_external_force(const SimState& state, const ExternalForcing& forcing,
                               const ChargeSet& charges, const MassModel& masses,
                               const Vec3& gravity, double softening_epsilon) {
  const Eigen::Index n = state.vertex_count();
  if (charges.charges.size() != n || masses.masses.size() != n)
    throw std::invalid_argument("net_external_force: inconsistent sizes");
  VecX f = VecX::Zero(3 * n);
  if (forcing.constant_force.size() == 3 * n) {
    f += forcing.constant_force;
  } else if (forcing.constant_force.size() != 0) {
    throw std::invalid_argument("net_external_force: constant_force must have length 3n");
  }
  const double kc = charges.coulomb_constant;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 x = state.positions.segment<3>(3 * i);
    const double q = charges.charges[i];
    Vec3 fi = masses.masses[i] * gravity;
    if (q != 0.0) {
      if (forcing.has_field()) fi += q * forcing.field(x);
      for (const ExternalCharge& e : forcing.external_charges)
        fi += kc * q * e.charge * coulomb_kernel(x, e.position, softening_epsilon);
    }
    f.segment<3>(3 * i) += fi;
  }
  return f;
}

inline VecX net_external_force(const SimState& state, const Model& model, const SimParams& params) {
  return net_external_force(state, model.forcing, model.charges, model.masses, params.gravity,
                            params.softening_epsilon);
}

}  // namespace msc
