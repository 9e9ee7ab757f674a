#pragma once

// Fast implicit mass-spring machinery: stiffness Laplacian L and mixing
// operator J, the per-spring local projection, elastic energy and its
// derivatives, and the prefactored global system M + h^2 L.

#include "msc/types.hpp"

#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <memory>

namespace msc {

struct ElasticOperators {
  SpMat graph_laplacian;  // n x n, sum_s k_s A_s A_s^T
  SpMat L;                // 3n x 3n
  SpMat J;                // 3n x 3s
  Eigen::Index n = 0;
  Eigen::Index s = 0;
};

/// Stacked per-spring direction vectors, each of norm rest_length.
struct SpringDirections {
  VecX d;
  int fallback_count = 0;  // springs whose endpoints coincided
};

inline ElasticOperators assemble_operators(const SpringTopology& topology, Eigen::Index n) {
  if (topology.vertex_count != n)
    throw std::invalid_argument("assemble_operators: topology vertex_count does not match n");
  topology.validate();
  const Eigen::Index s = static_cast<Eigen::Index>(topology.size());
  ElasticOperators ops;
  ops.n = n;
  ops.s = s;
  std::vector<Triplet> lap, l3, j3;
  lap.reserve(4 * s);
  l3.reserve(12 * s);
  j3.reserve(6 * s);
  for (Eigen::Index e = 0; e < s; ++e) {
    const Spring& sp = topology.springs[e];
    const std::pair<int, double> ends[2] = {{sp.i, 1.0}, {sp.j, -1.0}};
    for (const auto& [a, sa] : ends) {
      for (const auto& [b, sb] : ends) {
        lap.emplace_back(a, b, sp.k * sa * sb);
        for (int d = 0; d < 3; ++d) l3.emplace_back(3 * a + d, 3 * b + d, sp.k * sa * sb);
      }
      for (int d = 0; d < 3; ++d) j3.emplace_back(3 * a + d, 3 * e + d, sp.k * sa);
    }
  }
  ops.graph_laplacian.resize(n, n);
  ops.graph_laplacian.setFromTriplets(lap.begin(), lap.end());
  ops.L.resize(3 * n, 3 * n);
  ops.L.setFromTriplets(l3.begin(), l3.end());
  ops.J.resize(3 * n, 3 * s);
  ops.J.setFromTriplets(j3.begin(), j3.end());
  return ops;
}

/// Closed-form minimiser of |(x_i - x_j) - d| over |d| = rest_length.
inline SpringDirections local_step(const VecX& positions, const SpringTopology& topology,
                                   double softening_epsilon = 0.0) {
  SpringDirections out;
  out.d.resize(3 * static_cast<Eigen::Index>(topology.size()));
  for (std::size_t e = 0; e < topology.size(); ++e) {
    const Spring& sp = topology.springs[e];
    const Vec3 r = positions.segment<3>(3 * sp.i) - positions.segment<3>(3 * sp.j);
    const double len = r.norm();
    Vec3 d;
    if (len <= softening_epsilon || len == 0.0) {
      d = Vec3::UnitX() * sp.rest_length;
      ++out.fallback_count;
    } else {
      d = r * (sp.rest_length / len);
    }
    out.d.segment<3>(3 * static_cast<Eigen::Index>(e)) = d;
  }
  return out;
}

inline double elastic_energy(const VecX& positions, const SpringTopology& topology) {
  double e = 0.0;
  for (const Spring& sp : topology.springs) {
    const double len = (positions.segment<3>(3 * sp.i) - positions.segment<3>(3 * sp.j)).norm();
    e += 0.5 * sp.k * (len - sp.rest_length) * (len - sp.rest_length);
  }
  return e;
}

/// Gradient of the elastic energy (negated spring forces).
inline VecX elastic_gradient(const VecX& positions, const SpringTopology& topology) {
  VecX g = VecX::Zero(positions.size());
  for (const Spring& sp : topology.springs) {
    const Vec3 r = positions.segment<3>(3 * sp.i) - positions.segment<3>(3 * sp.j);
    const double len = r.norm();
    if (len == 0.0) continue;
    const Vec3 gi = sp.k * (len - sp.rest_length) / len * r;
    g.segment<3>(3 * sp.i) += gi;
    g.segment<3>(3 * sp.j) -= gi;
  }
  return g;
}

/// J dD/dX: per spring k * rest/len * (I - r r^T/len^2) scattered with the
/// incidence pattern. Subtracting it from L gives the elastic Hessian.
inline SpMat direction_jacobian_term(const VecX& positions, const SpringTopology& topology,
                                     double softening_epsilon = 0.0) {
  const Eigen::Index n3 = positions.size();
  std::vector<Triplet> t;
  t.reserve(36 * topology.size());
  for (const Spring& sp : topology.springs) {
    const Vec3 r = positions.segment<3>(3 * sp.i) - positions.segment<3>(3 * sp.j);
    const double len = r.norm();
    if (len <= softening_epsilon || len == 0.0) continue;
    const Vec3 u = r / len;
    const Mat3 blk = sp.k * sp.rest_length / len * (Mat3::Identity() - u * u.transpose());
    const std::pair<int, double> ends[2] = {{sp.i, 1.0}, {sp.j, -1.0}};
    for (const auto& [a, sa] : ends)
      for (const auto& [b, sb] : ends)
        for (int r0 = 0; r0 < 3; ++r0)
          for (int c0 = 0; c0 < 3; ++c0) t.emplace_back(3 * a + r0, 3 * b + c0, sa * sb * blk(r0, c0));
  }
  SpMat m(n3, n3);
  m.setFromTriplets(t.begin(), t.end());
  return m;
}

inline SpMat elastic_hessian(const VecX& positions, const SpringTopology& topology,
                             const ElasticOperators& ops, double softening_epsilon = 0.0) {
  SpMat h = ops.L - direction_jacobian_term(positions, topology, softening_epsilon);
  h.makeCompressed();
  return h;
}

// ---------------------------------------------------------------------------
// Linear solves with optional pinned vertices eliminated.

/// Splits 3n DOFs into free and pinned sets.
class DofPartition {
 public:
  DofPartition() = default;
  DofPartition(Eigen::Index n, const std::vector<int>& pinned_vertices) : n3_(3 * n) {
    std::vector<char> is_pinned(static_cast<std::size_t>(n), 0);
    for (int v : pinned_vertices) {
      if (v < 0 || v >= n) throw std::invalid_argument("pinned vertex index out of range");
      is_pinned[static_cast<std::size_t>(v)] = 1;
    }
    for (Eigen::Index v = 0; v < n; ++v)
      for (int d = 0; d < 3; ++d)
        (is_pinned[static_cast<std::size_t>(v)] ? pinned_ : free_).push_back(static_cast<int>(3 * v + d));
  }

  bool trivial() const { return pinned_.empty(); }
  const std::vector<int>& free() const { return free_; }
  const std::vector<int>& pinned() const { return pinned_; }
  Eigen::Index full_size() const { return n3_; }

  VecX restrict_free(const VecX& v) const {
    VecX out(static_cast<Eigen::Index>(free_.size()));
    for (std::size_t k = 0; k < free_.size(); ++k) out[static_cast<Eigen::Index>(k)] = v[free_[k]];
    return out;
  }

  /// Rows/columns of a square operator restricted to (rows, cols) index sets.
  static SpMat submatrix(const SpMat& a, const std::vector<int>& rows, const std::vector<int>& cols) {
    std::vector<int> rmap(static_cast<std::size_t>(a.rows()), -1), cmap(static_cast<std::size_t>(a.cols()), -1);
    for (std::size_t k = 0; k < rows.size(); ++k) rmap[static_cast<std::size_t>(rows[k])] = static_cast<int>(k);
    for (std::size_t k = 0; k < cols.size(); ++k) cmap[static_cast<std::size_t>(cols[k])] = static_cast<int>(k);
    std::vector<Triplet> t;
    for (int c = 0; c < a.outerSize(); ++c)
      for (SpMat::InnerIterator it(a, c); it; ++it) {
        const int r = rmap[static_cast<std::size_t>(it.row())];
        const int cc = cmap[static_cast<std::size_t>(it.col())];
        if (r >= 0 && cc >= 0) t.emplace_back(r, cc, it.value());
      }
    SpMat out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    out.setFromTriplets(t.begin(), t.end());
    return out;
  }

 private:
  Eigen::Index n3_ = 0;
  std::vector<int> free_;
  std::vector<int> pinned_;
};

/// Factorization of a symmetric sparse operator restricted to free DOFs.
/// LDL^T first; falls back to LU for indefinite or badly scaled matrices.
class SymmetricSolver {
 public:
  SymmetricSolver() = default;

  SymmetricSolver(const SpMat& a, DofPartition dofs) : dofs_(std::move(dofs)) {
    if (dofs_.trivial()) {
      aff_ = a;
    } else {
      aff_ = DofPartition::submatrix(a, dofs_.free(), dofs_.free());
      afp_ = DofPartition::submatrix(a, dofs_.free(), dofs_.pinned());
    }
    aff_.makeCompressed();
    ldlt_ = std::make_shared<Eigen::SimplicialLDLT<SpMat>>(aff_);
    if (ldlt_->info() != Eigen::Success || !ldlt_->vectorD().allFinite() ||
        (ldlt_->vectorD().array() == 0.0).any()) {
      ldlt_.reset();
      lu_ = std::make_shared<Eigen::SparseLU<SpMat>>();
      lu_->analyzePattern(aff_);
      lu_->factorize(aff_);
      if (lu_->info() != Eigen::Success)
        throw IllConditionedError("factorization failed: " + lu_->lastErrorMessage());
    }
  }

  /// Refactors a matrix with the same sparsity pattern, reusing the symbolic analysis.
  void refactor(const SpMat& a) {
    SpMat aff = dofs_.trivial() ? a : DofPartition::submatrix(a, dofs_.free(), dofs_.free());
    aff.makeCompressed();
    if (!ldlt_ || ldlt_.use_count() > 1 || aff.nonZeros() != aff_.nonZeros()) {
      *this = SymmetricSolver(a, dofs_);
      return;
    }
    aff_ = std::move(aff);
    if (!dofs_.trivial()) afp_ = DofPartition::submatrix(a, dofs_.free(), dofs_.pinned());
    ldlt_->factorize(aff_);
    if (ldlt_->info() != Eigen::Success || !ldlt_->vectorD().allFinite() || (ldlt_->vectorD().array() == 0.0).any())
      *this = SymmetricSolver(a, dofs_);
  }

  bool valid() const { return ldlt_ || lu_; }
  const DofPartition& dofs() const { return dofs_; }

  /// Solves A x = b on free DOFs; pinned DOFs of x are copied from `pinned_values`.
  VecX solve(const VecX& b, const VecX* pinned_values = nullptr) const {
    if (dofs_.trivial()) return solve_free(b);
    VecX rhs = dofs_.restrict_free(b);
    VecX xp = VecX::Zero(static_cast<Eigen::Index>(dofs_.pinned().size()));
    if (pinned_values)
      for (std::size_t k = 0; k < dofs_.pinned().size(); ++k)
        xp[static_cast<Eigen::Index>(k)] = (*pinned_values)[dofs_.pinned()[k]];
    rhs -= afp_ * xp;
    const VecX xf = solve_free(rhs);
    VecX x(dofs_.full_size());
    for (std::size_t k = 0; k < dofs_.free().size(); ++k) x[dofs_.free()[k]] = xf[static_cast<Eigen::Index>(k)];
    for (std::size_t k = 0; k < dofs_.pinned().size(); ++k) x[dofs_.pinned()[k]] = xp[static_cast<Eigen::Index>(k)];
    return x;
  }

  /// Solves for several right-hand sides with pinned rows held at zero.
  MatX solve_columns(const MatX& b) const {
    MatX x(b.rows(), b.cols());
    for (Eigen::Index c = 0; c < b.cols(); ++c) x.col(c) = solve(b.col(c));
    return x;
  }

 private:
  VecX solve_free(const VecX& b) const {
    if (ldlt_) return ldlt_->solve(b);
    return lu_->solve(b);
  }

  DofPartition dofs_;
  SpMat aff_;
  SpMat afp_;
  std::shared_ptr<Eigen::SimplicialLDLT<SpMat>> ldlt_;
  std::shared_ptr<Eigen::SparseLU<SpMat>> lu_;
};

/// M + h^2 L factored once per (h, topology, pinned set).
class PrefactoredSystem {
 public:
  PrefactoredSystem() = default;

  PrefactoredSystem(const VecX& mass_diag, const SpMat& L, double h, const std::vector<int>& pinned = {})
      : h_(h), pinned_(pinned) {
    if (!(h > 0.0)) throw std::invalid_argument("prefactor: h must be > 0");
    if ((mass_diag.array() <= 0.0).any()) throw std::invalid_argument("prefactor: masses must be positive");
    SpMat m(L.rows(), L.cols());
    m.setIdentity();
    m = mass_diag.asDiagonal() * m;
    system_ = m + h * h * L;
    system_.makeCompressed();
    solver_ = SymmetricSolver(system_, DofPartition(L.rows() / 3, pinned));
  }

  double h() const { return h_; }
  const std::vector<int>& pinned() const { return pinned_; }
  const SpMat& matrix() const { return system_; }
  const SymmetricSolver& solver() const { return solver_; }
  bool valid() const { return solver_.valid(); }

  VecX solve(const VecX& b, const VecX* pinned_values = nullptr) const { return solver_.solve(b, pinned_values); }

 private:
  double h_ = 0.0;
  std::vector<int> pinned_;
  SpMat system_;
  SymmetricSolver solver_;
};

inline PrefactoredSystem prefactor(const VecX& mass_diag, const SpMat& L, double h,
                                   const std::vector<int>& pinned = {}) {
  return PrefactoredSystem(mass_diag, L, h, pinned);
}

}  // namespace msc
