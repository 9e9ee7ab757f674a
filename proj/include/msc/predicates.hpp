#pragma once

// Orientation and in-sphere predicates. A floating-point evaluation is
// accepted when it clears a conservative error bound; otherwise the sign is
// recomputed exactly with rational arithmetic (doubles convert exactly).

#include "msc/types.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include <cmath>

namespace msc::geom {

namespace detail {

using Exact = boost::multiprecision::cpp_rational;

template <typename T>
T det3(const T& ax, const T& ay, const T& az, const T& bx, const T& by, const T& bz, const T& cx,
       const T& cy, const T& cz) {
  return ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx);
}

inline double perm3(double ax, double ay, double az, double bx, double by, double bz, double cx, double cy,
                    double cz) {
  using std::abs;
  return abs(ax) * (abs(by * cz) + abs(bz * cy)) + abs(ay) * (abs(bx * cz) + abs(bz * cx)) +
         abs(az) * (abs(bx * cy) + abs(by * cx));
}

template <typename T>
T orient_expr(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  const T ax(a.x()), ay(a.y()), az(a.z());
  return det3<T>(T(b.x()) - ax, T(b.y()) - ay, T(b.z()) - az, T(c.x()) - ax, T(c.y()) - ay, T(c.z()) - az,
                 T(d.x()) - ax, T(d.y()) - ay, T(d.z()) - az);
}

template <typename T>
T insphere_expr(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d, const Vec3& e) {
  const T ex(e.x()), ey(e.y()), ez(e.z());
  const T p[4][3] = {{T(a.x()) - ex, T(a.y()) - ey, T(a.z()) - ez},
                     {T(b.x()) - ex, T(b.y()) - ey, T(b.z()) - ez},
                     {T(c.x()) - ex, T(c.y()) - ey, T(c.z()) - ez},
                     {T(d.x()) - ex, T(d.y()) - ey, T(d.z()) - ez}};
  T w[4];
  for (int r = 0; r < 4; ++r) w[r] = p[r][0] * p[r][0] + p[r][1] * p[r][1] + p[r][2] * p[r][2];
  auto minor = [&](int r0, int r1, int r2) {
    return det3<T>(p[r0][0], p[r0][1], p[r0][2], p[r1][0], p[r1][1], p[r1][2], p[r2][0], p[r2][1], p[r2][2]);
  };
  const T det = -w[0] * minor(1, 2, 3) + w[1] * minor(0, 2, 3) - w[2] * minor(0, 1, 3) + w[3] * minor(0, 1, 2);
  return -det;
}

template <typename T>
int sign_of(const T& v) {
  return v > 0 ? 1 : (v < 0 ? -1 : 0);
}

}  // namespace detail

/// Sign of det[b-a, c-a, d-a]: +1 when (a,b,c,d) is positively oriented.
inline int orient3d(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  const Vec3 u = b - a, v = c - a, w = d - a;
  const double det = detail::det3(u.x(), u.y(), u.z(), v.x(), v.y(), v.z(), w.x(), w.y(), w.z());
  const double perm = detail::perm3(u.x(), u.y(), u.z(), v.x(), v.y(), v.z(), w.x(), w.y(), w.z());
  if (std::abs(det) > 1e-14 * perm) return det > 0 ? 1 : -1;
  return detail::sign_of(detail::orient_expr<detail::Exact>(a, b, c, d));
}

/// +1 when e is strictly inside the circumsphere of positively oriented (a,b,c,d).
inline int insphere(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d, const Vec3& e) {
  const Vec3 p[4] = {a - e, b - e, c - e, d - e};
  double w[4];
  for (int r = 0; r < 4; ++r) w[r] = p[r].squaredNorm();
  auto minor = [&](int r0, int r1, int r2) {
    return detail::det3(p[r0].x(), p[r0].y(), p[r0].z(), p[r1].x(), p[r1].y(), p[r1].z(), p[r2].x(), p[r2].y(),
                        p[r2].z());
  };
  auto pminor = [&](int r0, int r1, int r2) {
    return detail::perm3(p[r0].x(), p[r0].y(), p[r0].z(), p[r1].x(), p[r1].y(), p[r1].z(), p[r2].x(),
                         p[r2].y(), p[r2].z());
  };
  const double det = -(-w[0] * minor(1, 2, 3) + w[1] * minor(0, 2, 3) - w[2] * minor(0, 1, 3) + w[3] * minor(0, 1, 2));
  const double perm = w[0] * pminor(1, 2, 3) + w[1] * pminor(0, 2, 3) + w[2] * pminor(0, 1, 3) + w[3] * pminor(0, 1, 2);
  if (std::abs(det) > 1e-13 * perm) return det > 0 ? 1 : -1;
  return detail::sign_of(detail::insphere_expr<detail::Exact>(a, b, c, d, e));
}

/// Signed volume (times 6) in floating point.
inline double orient3d_value(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return (b - a).dot((c - a).cross(d - a));
}

}  // namespace msc::geom
