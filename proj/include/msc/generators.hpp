#pragma once

// Procedural meshes used as stand-ins for scanned models.

#include "msc/mesh.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace msc::gen {

/// Adds edges from every vertex to its k nearest neighbours.
inline void connect_nearest(MeshSource& mesh, int k) {
  const std::size_t n = mesh.vertices.size();
  std::vector<std::pair<double, int>> dist;
  for (std::size_t i = 0; i < n; ++i) {
    dist.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) dist.emplace_back((mesh.vertices[i] - mesh.vertices[j]).squaredNorm(), static_cast<int>(j));
    const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), dist.size());
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
    for (std::size_t t = 0; t < kk; ++t) {
      const int a = static_cast<int>(i), b = dist[t].second;
      mesh.edges.emplace_back(std::min(a, b), std::max(a, b));
    }
  }
  detail::finalize_edges(mesh.edges);
}

/// Parametric torus: `rings` samples around the main axis, `segments` around the tube.
/// Edges follow the quad grid plus one diagonal per quad.
inline MeshSource torus(double major, double minor, int rings = 29, int segments = 5) {
  MeshSource m;
  const double tau = 2.0 * std::numbers::pi;
  for (int u = 0; u < rings; ++u)
    for (int v = 0; v < segments; ++v) {
      const double a = tau * u / rings, b = tau * v / segments;
      m.vertices.emplace_back((major + minor * std::cos(b)) * std::cos(a), (major + minor * std::cos(b)) * std::sin(a),
                              minor * std::sin(b));
    }
  auto id = [&](int u, int v) { return ((u % rings) * segments) + (v % segments); };
  for (int u = 0; u < rings; ++u)
    for (int v = 0; v < segments; ++v) {
      const int a = id(u, v);
      for (int b : {id(u + 1, v), id(u, v + 1), id(u + 1, v + 1)}) m.edges.emplace_back(std::min(a, b), std::max(a, b));
    }
  detail::finalize_edges(m.edges);
  return m;
}

/// Near-uniform points on a sphere (golden-angle spiral).
inline std::vector<Vec3> fibonacci_sphere(int n, double radius) {
  std::vector<Vec3> pts;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * i;
    pts.emplace_back(radius * r * std::cos(phi), radius * r * std::sin(phi), radius * z);
  }
  return pts;
}

inline MeshSource sphere(int n, double radius, int neighbours = 6) {
  MeshSource m;
  m.vertices = fibonacci_sphere(n, radius);
  connect_nearest(m, neighbours);
  return m;
}

/// Lumpy closed surface: a sphere scaled per axis with low-frequency bumps.
inline MeshSource blob(int n, const Vec3& semi_axes, double bump = 0.15, int neighbours = 6) {
  MeshSource m;
  for (const Vec3& p : fibonacci_sphere(n, 1.0)) {
    const double theta = std::acos(std::clamp(p.z(), -1.0, 1.0));
    const double phi = std::atan2(p.y(), p.x());
    const double s = 1.0 + bump * std::sin(3.0 * theta) * std::cos(2.0 * phi) + 0.5 * bump * std::cos(5.0 * phi) * std::sin(theta);
    m.vertices.push_back(s * p.cwiseProduct(semi_axes));
  }
  connect_nearest(m, neighbours);
  return m;
}

/// Uniform random points in a cube of the given edge length centred at the origin.
inline MeshSource cloud(int n, double size, std::uint64_t seed = 7) {
  MeshSource m;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5 * size, 0.5 * size);
  for (int i = 0; i < n; ++i) {
    const double x = u(rng), y = u(rng), z = u(rng);
    m.vertices.emplace_back(x, y, z);
  }
  return m;
}

/// Rectangular cloth in the x-z plane (hanging along -z) with structural and
/// shear edges. Group "top_corners" holds the two upper corners.
inline MeshSource sheet(int nx, int nz, double width, double height) {
  MeshSource m;
  for (int r = 0; r < nz; ++r)
    for (int c = 0; c < nx; ++c)
      m.vertices.emplace_back(width * c / (nx - 1) - 0.5 * width, 0.0, -height * r / (nz - 1));
  auto id = [&](int r, int c) { return r * nx + c; };
  auto edge = [&](int a, int b) { m.edges.emplace_back(std::min(a, b), std::max(a, b)); };
  for (int r = 0; r < nz; ++r)
    for (int c = 0; c < nx; ++c) {
      if (c + 1 < nx) edge(id(r, c), id(r, c + 1));
      if (r + 1 < nz) edge(id(r, c), id(r + 1, c));
      if (c + 1 < nx && r + 1 < nz) {
        edge(id(r, c), id(r + 1, c + 1));
        edge(id(r, c + 1), id(r + 1, c));
      }
    }
  detail::finalize_edges(m.edges);
  m.groups["top_corners"] = {id(0, 0), id(0, nx - 1)};
  return m;
}

/// Splits vertices into two named groups by the sign of one coordinate.
inline void split_groups(MeshSource& m, int axis, const std::string& low, const std::string& high) {
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    m.groups[m.vertices[i][axis] < 0.0 ? low : high].push_back(static_cast<int>(i));
}

}  // namespace msc::gen
