#pragma once

// Exact pairwise Coulomb interaction: forces, potential energy and their
// derivatives with respect to positions and charges.

#include "msc/parallel.hpp"
#include "msc/types.hpp"

namespace msc {

/// Electric field at every charge due to all other charges, index-ordered sum.
inline VecX brute_field(const VecX& positions, const ChargeSet& charges, double eps, bool parallel = false) {
  const Eigen::Index n = positions.size() / 3;
  if (charges.charges.size() != n) throw std::invalid_argument("brute_field: charge count mismatch");
  VecX field = VecX::Zero(3 * n);
  const double kc = charges.coulomb_constant;
  auto row = [&](std::size_t ii) {
    const auto i = static_cast<Eigen::Index>(ii);
    const Vec3 xi = positions.segment<3>(3 * i);
    Vec3 e = Vec3::Zero();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i || charges.charges[j] == 0.0) continue;
      e += (kc * charges.charges[j]) * coulomb_kernel(xi, positions.segment<3>(3 * j), eps);
    }
    field.segment<3>(3 * i) = e;
  };
  if (parallel) {
    parallel_for_index(static_cast<std::size_t>(n), row, 8);
  } else {
    for (Eigen::Index i = 0; i < n; ++i) row(static_cast<std::size_t>(i));
  }
  return field;
}

/// F_c^i = q_i E(x_i) via the exact double loop.
inline VecX pairwise_forces_brute(const VecX& positions, const ChargeSet& charges, double eps,
                                  bool parallel = false) {
  VecX f = brute_field(positions, charges, eps, parallel);
  for (Eigen::Index i = 0; i < charges.charges.size(); ++i) f.segment<3>(3 * i) *= charges.charges[i];
  return f;
}

inline double coulomb_energy(const VecX& positions, const ChargeSet& charges, double eps = 0.0) {
  const Eigen::Index n = positions.size() / 3;
  double u = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double qi = charges.charges[i];
    if (qi == 0.0) continue;
    const Vec3 xi = positions.segment<3>(3 * i);
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double d = std::max((xi - positions.segment<3>(3 * j)).norm(), eps);
      if (d == 0.0) continue;
      u += charges.coulomb_constant * qi * charges.charges[j] / d;
    }
  }
  return u;
}

/// d/dx of the kernel (x - y)/|x - y|^3: I/r^3 - 3 r r^T / r^5.
inline Mat3 coulomb_kernel_jacobian(const Vec3& r) {
  const double d = r.norm();
  const double d2 = d * d;
  const double inv3 = 1.0 / (d2 * d);
  return inv3 * (Mat3::Identity() - 3.0 * r * r.transpose() / d2);
}

/// dQ/dX (3n x 3n, symmetric). Pairs closer than eps are left out.
inline MatX force_jacobian_positions(const VecX& positions, const ChargeSet& charges, double eps) {
  const Eigen::Index n = positions.size() / 3;
  MatX jac = MatX::Zero(3 * n, 3 * n);
  const double kc = charges.coulomb_constant;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double qi = charges.charges[i];
    if (qi == 0.0) continue;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double qj = charges.charges[j];
      if (qj == 0.0) continue;
      const Vec3 r = positions.segment<3>(3 * i) - positions.segment<3>(3 * j);
      if (r.norm() <= eps || r.norm() == 0.0) continue;
      const Mat3 b = kc * qi * qj * coulomb_kernel_jacobian(r);
      jac.block<3, 3>(3 * i, 3 * i) += b;
      jac.block<3, 3>(3 * j, 3 * j) += b;
      jac.block<3, 3>(3 * i, 3 * j) -= b;
      jac.block<3, 3>(3 * j, 3 * i) -= b;
    }
  }
  return jac;
}

/// (dQ/dX) * dx for a block of tangent columns, without forming the 3n x 3n operator.
inline MatX force_jacobian_apply(const VecX& positions, const ChargeSet& charges, double eps, const MatX& dx) {
  const Eigen::Index n = positions.size() / 3;
  const Eigen::Index p = dx.cols();
  MatX out = MatX::Zero(dx.rows(), p);
  const double kc = charges.coulomb_constant;
  const double eps2 = eps * eps;
  auto row = [&](std::size_t iu) {
    const auto i = static_cast<Eigen::Index>(iu);
    const double qi = charges.charges[i];
    if (qi == 0.0) return;
    const Vec3 xi = positions.segment<3>(3 * i);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double qj = charges.charges[j];
      if (j == i || qj == 0.0) continue;
      const Vec3 r = xi - positions.segment<3>(3 * j);
      const double d2 = r.squaredNorm();
      if (d2 <= eps2 || d2 == 0.0) continue;
      const double s = kc * qi * qj / (d2 * std::sqrt(d2));
      for (Eigen::Index c = 0; c < p; ++c) {
        const Vec3 w = dx.block<3, 1>(3 * i, c) - dx.block<3, 1>(3 * j, c);
        out.block<3, 1>(3 * i, c) += s * (w - (3.0 * r.dot(w) / d2) * r);
      }
    }
  };
  parallel_for_index(static_cast<std::size_t>(n), row, 8);
  return out;
}

/// dQ/dq (3n x n).
inline MatX force_gradient_charges(const VecX& positions, const ChargeSet& charges, double eps) {
  const Eigen::Index n = positions.size() / 3;
  MatX g = MatX::Zero(3 * n, n);
  const double kc = charges.coulomb_constant;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 xi = positions.segment<3>(3 * i);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const Vec3 kern = kc * coulomb_kernel(xi, positions.segment<3>(3 * j), eps);
      g.block<3, 1>(3 * i, j) += charges.charges[i] * kern;
      g.block<3, 1>(3 * i, i) += charges.charges[j] * kern;
    }
  }
  return g;
}

}  // namespace msc
