#pragma once

// Domain-discretized electric field. The charge bounding box is sampled with
// a Halton sequence and tetrahedralized; each charge gets a neighbourhood of
// grid points (its tetrahedron plus face-adjacent ones). Far-field values are
// gathered on grid points from every charge that is not nearby, interpolated
// back barycentrically, and nearby charges are summed exactly.

#include "msc/coulomb.hpp"
#include "msc/delaunay.hpp"
#include "msc/parallel.hpp"

#include <array>
#include <limits>
#include <memory>
#include <tuple>
#include <vector>

namespace msc {

/// Radical inverse of `index` in the given base.
inline double radical_inverse(std::uint64_t index, unsigned base) {
  double inv = 1.0 / base, f = inv, r = 0.0;
  while (index > 0) {
    r += f * static_cast<double>(index % base);
    index /= base;
    f *= inv;
  }
  return r;
}

/// The first `count` 3D Halton points (bases 2, 3, 5), skipping the origin.
inline std::vector<Vec3> halton_points(std::size_t count) {
  std::vector<Vec3> pts;
  pts.reserve(count);
  for (std::size_t i = 1; i <= count; ++i)
    pts.emplace_back(radical_inverse(i, 2), radical_inverse(i, 3), radical_inverse(i, 5));
  return pts;
}

struct DomainGrid {
  std::vector<Vec3> grid_points;                  // Halton samples, then the 8 box corners
  std::vector<std::array<int, 4>> tetrahedra;
  std::vector<std::array<int, 4>> tet_adjacency;  // -1 on the hull
  Vec3 box_lo = Vec3::Zero();
  Vec3 box_hi = Vec3::Zero();
  int samples = 0;
  geom::Delaunay3 mesh;

  std::size_t size() const { return grid_points.size(); }
};

struct NeighborhoodIndex {
  std::vector<std::vector<int>> nearby_grid;  // N_i, sorted
  std::vector<std::vector<int>> inverse;      // M_j, sorted charge indices
  std::vector<int> containing_tet;
  std::vector<std::array<double, 4>> barycentric;
};

struct FarFieldTable {
  std::vector<Vec3> field;
};

struct DdefOptions {
  double margin = 0.05;
  double softening_epsilon = 1e-6;
  bool parallel = true;
  // Remove from the interpolated far field whatever a nearby charge already
  // deposited on the vertices of tau_i, so its exact near term is not counted twice.
  bool overlap_correction = true;
};

/// Bounding box of the positions with flat axes inflated and a relative margin.
inline std::pair<Vec3, Vec3> expanded_bounds(const VecX& positions, double margin) {
  const Eigen::Index n = positions.size() / 3;
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (Eigen::Index i = 0; i < n; ++i) {
    lo = lo.cwiseMin(positions.segment<3>(3 * i));
    hi = hi.cwiseMax(positions.segment<3>(3 * i));
  }
  Vec3 ext = hi - lo;
  const double largest = ext.maxCoeff();
  const double floor = largest > 0.0 ? 0.01 * largest : 1e-3;
  for (int d = 0; d < 3; ++d) {
    if (ext[d] < floor) {
      const double c = 0.5 * (lo[d] + hi[d]);
      lo[d] = c - 0.5 * floor;
      hi[d] = c + 0.5 * floor;
      ext[d] = floor;
    }
  }
  return {lo - margin * ext, hi + margin * ext};
}

/// Grid over an explicit box: m Halton samples plus the 8 corners.
inline DomainGrid discretize_box(const Vec3& lo, const Vec3& hi, int m) {
  if (m < 8) throw std::invalid_argument("discretize_domain: m must be >= 8");
  if (!((hi - lo).minCoeff() > 0.0)) throw std::invalid_argument("discretize_domain: empty box");
  DomainGrid g;
  g.box_lo = lo;
  g.box_hi = hi;
  const Vec3 ext = g.box_hi - g.box_lo;
  g.samples = m;
  std::vector<Vec3> pts = halton_points(static_cast<std::size_t>(m));
  for (Vec3& p : pts) p = g.box_lo + p.cwiseProduct(ext);
  g.mesh = geom::Delaunay3(pts, g.box_lo, g.box_hi);
  g.grid_points = g.mesh.points();
  g.tetrahedra.reserve(g.mesh.size());
  g.tet_adjacency.reserve(g.mesh.size());
  for (const geom::Tetrahedron& t : g.mesh.tets()) {
    g.tetrahedra.push_back(t.v);
    g.tet_adjacency.push_back(t.nbr);
  }
  return g;
}

inline DomainGrid discretize_domain(const VecX& positions, int m, double margin = 0.05) {
  if (positions.size() < 3) throw std::invalid_argument("discretize_domain: need at least one charge");
  const auto [lo, hi] = expanded_bounds(positions, margin);
  return discretize_box(lo, hi, m);
}

/// Locates every charge, computes barycentrics, N_i and the inverse sets M_j.
/// `hints` (optional) seeds point location per charge, e.g. last frame's tets.
inline NeighborhoodIndex build_neighborhoods(const DomainGrid& grid, const VecX& positions,
                                             const std::vector<int>* hints = nullptr) {
  const Eigen::Index n = positions.size() / 3;
  NeighborhoodIndex nb;
  nb.nearby_grid.resize(static_cast<std::size_t>(n));
  nb.containing_tet.resize(static_cast<std::size_t>(n));
  nb.barycentric.resize(static_cast<std::size_t>(n));
  nb.inverse.assign(grid.size(), {});
  int walk_from = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    const Vec3 x = positions.segment<3>(3 * i);
    int hint = walk_from;
    if (hints && iu < hints->size() && (*hints)[iu] >= 0) hint = (*hints)[iu];
    const int t = grid.mesh.locate(x, hint);
    if (t < 0)
      throw Error("ddef: charge " + std::to_string(i) + " lies outside the grid hull; rebuild the grid");
    walk_from = t;
    nb.containing_tet[iu] = t;
    nb.barycentric[iu] = grid.mesh.barycentric(t, x);
    std::vector<int>& near = nb.nearby_grid[iu];
    near.assign(grid.tetrahedra[static_cast<std::size_t>(t)].begin(), grid.tetrahedra[static_cast<std::size_t>(t)].end());
    for (int adj : grid.tet_adjacency[static_cast<std::size_t>(t)])
      if (adj >= 0)
        near.insert(near.end(), grid.tetrahedra[static_cast<std::size_t>(adj)].begin(),
                    grid.tetrahedra[static_cast<std::size_t>(adj)].end());
    std::sort(near.begin(), near.end());
    near.erase(std::unique(near.begin(), near.end()), near.end());
    for (int j : near) nb.inverse[static_cast<std::size_t>(j)].push_back(static_cast<int>(i));
  }
  return nb;
}

/// Far field at every grid point from charges that are not nearby to it.
inline FarFieldTable gather_far_field(const DomainGrid& grid, const NeighborhoodIndex& nb, const VecX& positions,
                                      const ChargeSet& charges, const DdefOptions& opt = {}) {
  const Eigen::Index n = positions.size() / 3;
  FarFieldTable table;
  table.field.assign(grid.size(), Vec3::Zero());
  const double kc = charges.coulomb_constant;
  auto gather = [&](std::size_t j) {
    const Vec3& u = grid.grid_points[j];
    const std::vector<int>& skip = nb.inverse[j];
    std::size_t s = 0;
    Vec3 e = Vec3::Zero();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (s < skip.size() && skip[s] == i) {
        ++s;
        continue;
      }
      const double q = charges.charges[i];
      if (q == 0.0) continue;
      e += (kc * q) * coulomb_kernel(u, positions.segment<3>(3 * i), opt.softening_epsilon);
    }
    table.field[j] = e;
  };
  if (opt.parallel) {
    parallel_for_index(grid.size(), gather, 4);
  } else {
    for (std::size_t j = 0; j < grid.size(); ++j) gather(j);
  }
  return table;
}

struct FieldParts {
  VecX far;   // interpolated from the grid
  VecX near;  // exact sum over nearby charges
  VecX total() const { return far + near; }
};

inline FieldParts evaluate_field_parts(const DomainGrid& grid, const NeighborhoodIndex& nb,
                                       const FarFieldTable& table, const VecX& positions,
                                       const ChargeSet& charges, const DdefOptions& opt = {}) {
  const Eigen::Index n = positions.size() / 3;
  FieldParts out{VecX::Zero(3 * n), VecX::Zero(3 * n)};
  const double kc = charges.coulomb_constant;
  auto eval = [&](std::size_t iu) {
    const auto i = static_cast<Eigen::Index>(iu);
    const auto& tet = grid.tetrahedra[static_cast<std::size_t>(nb.containing_tet[iu])];
    Vec3 far = Vec3::Zero();
    for (int k = 0; k < 4; ++k)
      far += nb.barycentric[iu][static_cast<std::size_t>(k)] * table.field[static_cast<std::size_t>(tet[static_cast<std::size_t>(k)])];
    std::vector<int> sources;
    for (int l : nb.nearby_grid[iu]) {
      const auto& ml = nb.inverse[static_cast<std::size_t>(l)];
      sources.insert(sources.end(), ml.begin(), ml.end());
    }
    std::sort(sources.begin(), sources.end());
    sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
    const Vec3 xi = positions.segment<3>(3 * i);
    Vec3 near = Vec3::Zero();
    for (int s : sources) {
      if (s == i || charges.charges[s] == 0.0) continue;
      const Vec3 xs = positions.segment<3>(3 * s);
      near += (kc * charges.charges[s]) * coulomb_kernel(xi, xs, opt.softening_epsilon);
      if (!opt.overlap_correction) continue;
      const std::vector<int>& ns = nb.nearby_grid[static_cast<std::size_t>(s)];
      for (int k = 0; k < 4; ++k) {
        const int v = tet[static_cast<std::size_t>(k)];
        if (std::binary_search(ns.begin(), ns.end(), v)) continue;
        far -= (nb.barycentric[iu][static_cast<std::size_t>(k)] * kc * charges.charges[s]) *
               coulomb_kernel(grid.grid_points[static_cast<std::size_t>(v)], xs, opt.softening_epsilon);
      }
    }
    out.far.segment<3>(3 * i) = far;
    out.near.segment<3>(3 * i) = near;
  };
  if (opt.parallel) {
    parallel_for_index(static_cast<std::size_t>(n), eval, 8);
  } else {
    for (Eigen::Index i = 0; i < n; ++i) eval(static_cast<std::size_t>(i));
  }
  return out;
}

inline VecX evaluate_field(const DomainGrid& grid, const NeighborhoodIndex& nb, const FarFieldTable& table,
                           const VecX& positions, const ChargeSet& charges, const DdefOptions& opt = {}) {
  return evaluate_field_parts(grid, nb, table, positions, charges, opt).total();
}

/// Full approximate field at every charge (grid rebuilt from the positions).
inline VecX ddef_field(const VecX& positions, const ChargeSet& charges, int m, const DdefOptions& opt = {}) {
  const DomainGrid grid = discretize_domain(positions, m, opt.margin);
  const NeighborhoodIndex nb = build_neighborhoods(grid, positions);
  const FarFieldTable table = gather_far_field(grid, nb, positions, charges, opt);
  return evaluate_field(grid, nb, table, positions, charges, opt);
}

inline VecX field_to_forces(VecX field, const ChargeSet& charges) {
  for (Eigen::Index i = 0; i < charges.charges.size(); ++i) field.segment<3>(3 * i) *= charges.charges[i];
  return field;
}

inline VecX ddef_forces(const VecX& positions, const ChargeSet& charges, const SimParams& params) {
  DdefOptions opt;
  opt.softening_epsilon = params.softening_epsilon;
  opt.overlap_correction = params.ddef_overlap_correction;
  return field_to_forces(ddef_field(positions, charges, params.ddef_m, opt), charges);
}

/// Per-charge relative error |a - b| / |b|, skipping charges where |b| == 0.
inline std::vector<double> relative_field_errors(const VecX& approx, const VecX& exact) {
  std::vector<double> err;
  for (Eigen::Index i = 0; i < exact.size() / 3; ++i) {
    const double ref = exact.segment<3>(3 * i).norm();
    if (ref == 0.0) continue;
    err.push_back((approx.segment<3>(3 * i) - exact.segment<3>(3 * i)).norm() / ref);
  }
  return err;
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Stateful force backend that can keep a grid across several frames.
class DdefEngine {
 public:
  DdefEngine() = default;

  VecX forces(const VecX& positions, const ChargeSet& charges, const SimParams& params) {
    DdefOptions opt;
    opt.softening_epsilon = params.softening_epsilon;
    opt.overlap_correction = params.ddef_overlap_correction;
    const bool stale = !grid_ || frames_on_grid_ >= params.reuse_grid_frames || grid_->samples != params.ddef_m;
    if (stale) rebuild(positions, params.ddef_m, opt.margin);
    NeighborhoodIndex nb;
    try {
      nb = build_neighborhoods(*grid_, positions, &last_tets_);
    } catch (const Error&) {
      rebuild(positions, params.ddef_m, opt.margin);
      nb = build_neighborhoods(*grid_, positions);
    }
    ++frames_on_grid_;
    last_tets_ = nb.containing_tet;
    const FarFieldTable table = gather_far_field(*grid_, nb, positions, charges, opt);
    return field_to_forces(evaluate_field(*grid_, nb, table, positions, charges, opt), charges);
  }

  void reset() {
    grid_.reset();
    last_tets_.clear();
    frames_on_grid_ = 0;
  }

 private:
  void rebuild(const VecX& positions, int m, double margin) {
    grid_ = std::make_shared<DomainGrid>(discretize_domain(positions, m, margin));
    last_tets_.clear();
    frames_on_grid_ = 0;
  }

  std::shared_ptr<DomainGrid> grid_;
  std::vector<int> last_tets_;
  int frames_on_grid_ = 0;
};

}  // namespace msc
