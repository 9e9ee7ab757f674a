#pragma once

// Incremental (Bowyer-Watson) Delaunay tetrahedralization of points inside an
// axis-aligned box. The eight box corners seed the mesh, so every inserted
// point lies strictly inside the current hull and no super-simplex is needed.

#include "msc/predicates.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <unordered_map>
#include <vector>

namespace msc::geom {

struct Tetrahedron {
  std::array<int, 4> v{};          // positively oriented
  std::array<int, 4> nbr{-1, -1, -1, -1};  // nbr[k] shares the face opposite v[k]
};

class Delaunay3 {
 public:
  Delaunay3() = default;

  /// Tetrahedralizes the box corners plus `interior`, which must lie strictly
  /// inside [lo, hi]. Corner vertices get indices 0..7 after the interior ones.
  Delaunay3(const std::vector<Vec3>& interior, const Vec3& lo, const Vec3& hi) { build(interior, lo, hi); }

  const std::vector<Vec3>& points() const { return points_; }
  const std::vector<Tetrahedron>& tets() const { return tets_; }
  std::size_t size() const { return tets_.size(); }

  /// Index of a tetrahedron containing p (closed), or -1 when p is outside the hull.
  int locate(const Vec3& p, int hint = 0) const {
    if (tets_.empty()) return -1;
    int t = (hint >= 0 && hint < static_cast<int>(tets_.size())) ? hint : 0;
    const std::size_t limit = 4 * tets_.size() + 16;
    unsigned rot = 0;
    for (std::size_t step = 0; step < limit; ++step) {
      const Tetrahedron& tet = tets_[static_cast<std::size_t>(t)];
      int next = -2;
      for (int kk = 0; kk < 4; ++kk) {
        const int k = static_cast<int>((kk + rot) & 3u);
        if (side(tet, k, p) < 0) {
          next = tet.nbr[static_cast<std::size_t>(k)];
          break;
        }
      }
      if (next == -2) return t;
      if (next < 0) return -1;
      t = next;
      rot = rot * 1103515245u + 12345u;
      rot >>= 3;
    }
    return locate_scan(p);
  }

  int locate_scan(const Vec3& p) const {
    for (std::size_t t = 0; t < tets_.size(); ++t) {
      bool inside = true;
      for (int k = 0; k < 4 && inside; ++k) inside = side(tets_[t], k, p) >= 0;
      if (inside) return static_cast<int>(t);
    }
    return -1;
  }

  /// Barycentric coordinates of p in tetrahedron t (order matches v[]).
  std::array<double, 4> barycentric(int t, const Vec3& p) const {
    const Tetrahedron& tet = tets_[static_cast<std::size_t>(t)];
    const Vec3& a = points_[static_cast<std::size_t>(tet.v[0])];
    const Vec3& b = points_[static_cast<std::size_t>(tet.v[1])];
    const Vec3& c = points_[static_cast<std::size_t>(tet.v[2])];
    const Vec3& d = points_[static_cast<std::size_t>(tet.v[3])];
    Mat3 m;
    m.col(0) = b - a;
    m.col(1) = c - a;
    m.col(2) = d - a;
    const Vec3 l = m.partialPivLu().solve(p - a);
    std::array<double, 4> w{1.0 - l.sum(), l[0], l[1], l[2]};
    for (int k = 0; k < 4; ++k)
      if (tet.v[static_cast<std::size_t>(k)] >= 0 &&
          p == points_[static_cast<std::size_t>(tet.v[static_cast<std::size_t>(k)])]) {
        w = {0.0, 0.0, 0.0, 0.0};
        w[static_cast<std::size_t>(k)] = 1.0;
      }
    return w;
  }

  double volume(int t) const {
    const Tetrahedron& tet = tets_[static_cast<std::size_t>(t)];
    return orient3d_value(points_[static_cast<std::size_t>(tet.v[0])], points_[static_cast<std::size_t>(tet.v[1])],
                          points_[static_cast<std::size_t>(tet.v[2])], points_[static_cast<std::size_t>(tet.v[3])]) /
           6.0;
  }

 private:
  // Orientation of p against the face opposite v[k]; positive means p is on v[k]'s side.
  int side(const Tetrahedron& tet, int k, const Vec3& p) const {
    std::array<const Vec3*, 4> q;
    for (int r = 0; r < 4; ++r) q[static_cast<std::size_t>(r)] = &points_[static_cast<std::size_t>(tet.v[static_cast<std::size_t>(r)])];
    q[static_cast<std::size_t>(k)] = &p;
    return orient3d(*q[0], *q[1], *q[2], *q[3]);
  }

  int in_circumsphere(const Tetrahedron& tet, const Vec3& p) const {
    return insphere(points_[static_cast<std::size_t>(tet.v[0])], points_[static_cast<std::size_t>(tet.v[1])],
                    points_[static_cast<std::size_t>(tet.v[2])], points_[static_cast<std::size_t>(tet.v[3])], p);
  }

  void build(const std::vector<Vec3>& interior, const Vec3& lo, const Vec3& hi) {
    const std::size_t m = interior.size();
    points_ = interior;
    for (int c = 0; c < 8; ++c)
      points_.emplace_back((c & 1) ? hi.x() : lo.x(), (c & 2) ? hi.y() : lo.y(), (c & 4) ? hi.z() : lo.z());
    const int base = static_cast<int>(m);

    // Kuhn subdivision of the box along the 000-111 diagonal.
    const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    for (const auto& pr : perms) {
      Tetrahedron t;
      const int c1 = 1 << pr[0];
      const int c2 = c1 | (1 << pr[1]);
      t.v = {base + 0, base + c1, base + c2, base + 7};
      if (orient3d_value(points_[static_cast<std::size_t>(t.v[0])], points_[static_cast<std::size_t>(t.v[1])],
                         points_[static_cast<std::size_t>(t.v[2])], points_[static_cast<std::size_t>(t.v[3])]) < 0)
        std::swap(t.v[2], t.v[3]);
      tets_.push_back(t);
    }
    connect_all();

    // Spatially coherent insertion order (Morton code on a 2^10 grid).
    std::vector<std::uint32_t> order(m);
    std::iota(order.begin(), order.end(), 0u);
    std::vector<std::uint64_t> code(m);
    const Vec3 ext = (hi - lo).cwiseMax(Vec3::Constant(1e-300));
    for (std::size_t i = 0; i < m; ++i) {
      std::uint64_t c = 0;
      std::uint32_t g[3];
      for (int d = 0; d < 3; ++d)
        g[d] = static_cast<std::uint32_t>(std::clamp((interior[i][d] - lo[d]) / ext[d], 0.0, 1.0) * 1023.0);
      for (int bit = 9; bit >= 0; --bit)
        for (int d = 0; d < 3; ++d) c = (c << 1) | ((g[d] >> bit) & 1u);
      code[i] = c;
    }
    std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return code[a] < code[b]; });

    alive_.assign(tets_.size(), 1);
    mark_.assign(tets_.size(), 0);
    int hint = 0;
    for (std::uint32_t idx : order) hint = insert(static_cast<int>(idx), hint);
    compact();
  }

  void connect_all() {
    std::unordered_map<std::uint64_t, std::pair<int, int>> faces;
    auto key = [](std::array<int, 3> f) {
      std::sort(f.begin(), f.end());
      return (static_cast<std::uint64_t>(f[0]) << 42) | (static_cast<std::uint64_t>(f[1]) << 21) |
             static_cast<std::uint64_t>(f[2]);
    };
    for (std::size_t t = 0; t < tets_.size(); ++t) {
      for (int k = 0; k < 4; ++k) {
        std::array<int, 3> f;
        int c = 0;
        for (int r = 0; r < 4; ++r)
          if (r != k) f[static_cast<std::size_t>(c++)] = tets_[t].v[static_cast<std::size_t>(r)];
        const auto kf = key(f);
        auto it = faces.find(kf);
        if (it == faces.end()) {
          faces.emplace(kf, std::make_pair(static_cast<int>(t), k));
        } else {
          tets_[t].nbr[static_cast<std::size_t>(k)] = it->second.first;
          tets_[static_cast<std::size_t>(it->second.first)].nbr[static_cast<std::size_t>(it->second.second)] =
              static_cast<int>(t);
        }
      }
    }
  }

  int new_slot() {
    if (!free_.empty()) {
      const int s = free_.back();
      free_.pop_back();
      return s;
    }
    tets_.emplace_back();
    alive_.push_back(0);
    mark_.push_back(0);
    return static_cast<int>(tets_.size() - 1);
  }

  // Inserts point pi, returns a tetrahedron incident to it.
  int insert(int pi, int hint) {
    const Vec3& p = points_[static_cast<std::size_t>(pi)];
    if (hint < 0 || !alive_[static_cast<std::size_t>(hint)]) hint = first_alive();
    int t0 = locate_alive(p, hint);
    if (t0 < 0) throw std::runtime_error("Delaunay3: point outside the box");

    ++epoch_;
    std::vector<int> cavity{t0};
    mark_[static_cast<std::size_t>(t0)] = epoch_;
    std::vector<std::pair<int, int>> boundary;
    for (;;) {
      // Grow by strict in-sphere conflicts.
      for (std::size_t c = 0; c < cavity.size(); ++c) {
        const Tetrahedron& tet = tets_[static_cast<std::size_t>(cavity[c])];
        for (int k = 0; k < 4; ++k) {
          const int nb = tet.nbr[static_cast<std::size_t>(k)];
          if (nb < 0 || mark_[static_cast<std::size_t>(nb)] == epoch_) continue;
          if (in_circumsphere(tets_[static_cast<std::size_t>(nb)], p) > 0) {
            mark_[static_cast<std::size_t>(nb)] = epoch_;
            cavity.push_back(nb);
          }
        }
      }
      // Boundary faces must be strictly visible from p.
      boundary.clear();
      int repair = -1;
      for (int c : cavity) {
        const Tetrahedron& tet = tets_[static_cast<std::size_t>(c)];
        for (int k = 0; k < 4 && repair < 0; ++k) {
          const int nb = tet.nbr[static_cast<std::size_t>(k)];
          if (nb >= 0 && mark_[static_cast<std::size_t>(nb)] == epoch_) continue;
          if (side(tet, k, p) <= 0) {
            if (nb < 0) throw std::runtime_error("Delaunay3: point on hull boundary");
            repair = nb;
          } else {
            boundary.emplace_back(c, k);
          }
        }
        if (repair >= 0) break;
      }
      if (repair < 0) break;
      mark_[static_cast<std::size_t>(repair)] = epoch_;
      cavity.push_back(repair);
    }

    // Replace cavity with a fan of new tetrahedra around p.
    std::vector<int> outer_slot(boundary.size(), -1);
    for (std::size_t f = 0; f < boundary.size(); ++f) {
      const auto [c, k] = boundary[f];
      const int outer = tets_[static_cast<std::size_t>(c)].nbr[static_cast<std::size_t>(k)];
      if (outer < 0) continue;
      for (int r = 0; r < 4; ++r)
        if (tets_[static_cast<std::size_t>(outer)].nbr[static_cast<std::size_t>(r)] == c) outer_slot[f] = r;
    }
    std::vector<Tetrahedron> fresh;
    fresh.reserve(boundary.size());
    for (const auto& [c, k] : boundary) {
      Tetrahedron nt;
      nt.v = tets_[static_cast<std::size_t>(c)].v;
      nt.v[static_cast<std::size_t>(k)] = pi;
      nt.nbr = {-1, -1, -1, -1};
      nt.nbr[static_cast<std::size_t>(k)] = tets_[static_cast<std::size_t>(c)].nbr[static_cast<std::size_t>(k)];
      fresh.push_back(nt);
    }
    for (int c : cavity) {
      alive_[static_cast<std::size_t>(c)] = 0;
      free_.push_back(c);
    }
    std::vector<int> slots(fresh.size());
    for (std::size_t f = 0; f < fresh.size(); ++f) slots[f] = new_slot();

    std::unordered_map<std::uint64_t, std::pair<int, int>> edges;
    edges.reserve(fresh.size() * 3);
    for (std::size_t f = 0; f < fresh.size(); ++f) {
      const int slot = slots[f];
      const int k = boundary[f].second;
      Tetrahedron& nt = fresh[f];
      const int outer = nt.nbr[static_cast<std::size_t>(k)];
      if (outer >= 0) tets_[static_cast<std::size_t>(outer)].nbr[static_cast<std::size_t>(outer_slot[f])] = slot;
      for (int r = 0; r < 4; ++r) {
        if (r == k) continue;
        // Face opposite v[r] contains p and the edge of the boundary face without v[r].
        int a = -1, b = -1;
        for (int s = 0; s < 4; ++s) {
          if (s == r || s == k) continue;
          (a < 0 ? a : b) = nt.v[static_cast<std::size_t>(s)];
        }
        if (a > b) std::swap(a, b);
        const std::uint64_t key = (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint32_t>(b);
        auto it = edges.find(key);
        if (it == edges.end()) {
          edges.emplace(key, std::make_pair(static_cast<int>(f), r));
        } else {
          nt.nbr[static_cast<std::size_t>(r)] = slots[static_cast<std::size_t>(it->second.first)];
          fresh[static_cast<std::size_t>(it->second.first)].nbr[static_cast<std::size_t>(it->second.second)] = slot;
        }
      }
    }
    for (std::size_t f = 0; f < fresh.size(); ++f) {
      tets_[static_cast<std::size_t>(slots[f])] = fresh[f];
      alive_[static_cast<std::size_t>(slots[f])] = 1;
    }
    return slots.empty() ? first_alive() : slots.front();
  }

  int first_alive() const {
    for (std::size_t t = 0; t < alive_.size(); ++t)
      if (alive_[t]) return static_cast<int>(t);
    return -1;
  }

  int locate_alive(const Vec3& p, int t) const {
    const std::size_t limit = 4 * tets_.size() + 16;
    unsigned rot = 0;
    for (std::size_t step = 0; step < limit; ++step) {
      const Tetrahedron& tet = tets_[static_cast<std::size_t>(t)];
      int next = -2;
      for (int kk = 0; kk < 4; ++kk) {
        const int k = static_cast<int>((kk + rot) & 3u);
        if (side(tet, k, p) < 0) {
          next = tet.nbr[static_cast<std::size_t>(k)];
          break;
        }
      }
      if (next == -2) return t;
      if (next < 0) return -1;
      t = next;
      rot = rot * 1103515245u + 12345u;
      rot >>= 3;
    }
    for (std::size_t s = 0; s < tets_.size(); ++s) {
      if (!alive_[s]) continue;
      bool inside = true;
      for (int k = 0; k < 4 && inside; ++k) inside = side(tets_[s], k, p) >= 0;
      if (inside) return static_cast<int>(s);
    }
    return -1;
  }

  void compact() {
    std::vector<int> remap(tets_.size(), -1);
    std::vector<Tetrahedron> out;
    out.reserve(tets_.size());
    for (std::size_t t = 0; t < tets_.size(); ++t)
      if (alive_[t]) {
        remap[t] = static_cast<int>(out.size());
        out.push_back(tets_[t]);
      }
    for (Tetrahedron& t : out)
      for (int& nb : t.nbr)
        if (nb >= 0) nb = remap[static_cast<std::size_t>(nb)];
    tets_ = std::move(out);
    alive_.clear();
    mark_.clear();
    free_.clear();
  }

  std::vector<Vec3> points_;
  std::vector<Tetrahedron> tets_;
  std::vector<char> alive_;
  std::vector<int> mark_;
  std::vector<int> free_;
  int epoch_ = 0;
};

}  // namespace msc::geom
