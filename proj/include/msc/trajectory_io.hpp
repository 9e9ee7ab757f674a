#pragma once

// Trajectory files.
//
// Binary: little-endian f64 throughout. Header [n, frame_count, h], then per
// frame [time, x0, y0, z0, ..., vx0, vy0, vz0, ...] (1 + 6n values).
// CSV: one row per vertex per frame: frame,time,vertex,x,y,z,vx,vy,vz.

#include "msc/integrators.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>

namespace msc {

namespace detail {

inline void put_f64(std::ostream& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  char buf[8];
  std::memcpy(buf, &bits, 8);
  out.write(buf, 8);
}

inline double get_f64(std::istream& in) {
  char buf[8];
  if (!in.read(buf, 8)) throw IoError("trajectory file is truncated");
  std::uint64_t bits;
  std::memcpy(&bits, buf, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void write_trajectory_binary(std::ostream& out, const Trajectory& traj) {
  const Eigen::Index n = traj.size() ? traj.states.front().vertex_count() : 0;
  detail::put_f64(out, static_cast<double>(n));
  detail::put_f64(out, static_cast<double>(traj.size()));
  detail::put_f64(out, traj.h);
  for (const SimState& s : traj.states) {
    detail::put_f64(out, s.time);
    for (Eigen::Index i = 0; i < 3 * n; ++i) detail::put_f64(out, s.positions[i]);
    for (Eigen::Index i = 0; i < 3 * n; ++i) detail::put_f64(out, s.velocities[i]);
  }
  if (!out) throw IoError("failed to write trajectory");
}

inline Trajectory read_trajectory_binary(std::istream& in) {
  const double nd = detail::get_f64(in), fd = detail::get_f64(in);
  Trajectory traj;
  traj.h = detail::get_f64(in);
  if (!(nd >= 0 && fd >= 0) || nd != std::floor(nd) || fd != std::floor(fd) || nd > 1e9 || fd > 1e9)
    throw IoError("trajectory header is malformed");
  const auto n = static_cast<Eigen::Index>(nd);
  const auto frames = static_cast<std::size_t>(fd);
  for (std::size_t k = 0; k < frames; ++k) {
    SimState s;
    s.time = detail::get_f64(in);
    s.positions.resize(3 * n);
    s.velocities.resize(3 * n);
    for (Eigen::Index i = 0; i < 3 * n; ++i) s.positions[i] = detail::get_f64(in);
    for (Eigen::Index i = 0; i < 3 * n; ++i) s.velocities[i] = detail::get_f64(in);
    s.prev_positions = s.positions - traj.h * s.velocities;
    traj.states.push_back(std::move(s));
  }
  return traj;
}

inline void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
  out << "frame,time,vertex,x,y,z,vx,vy,vz\n" << std::setprecision(17);
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const SimState& s = traj.states[k];
    for (Eigen::Index i = 0; i < s.vertex_count(); ++i) {
      out << k << ',' << s.time << ',' << i;
      for (int d = 0; d < 3; ++d) out << ',' << s.positions[3 * i + d];
      for (int d = 0; d < 3; ++d) out << ',' << s.velocities[3 * i + d];
      out << '\n';
    }
  }
  if (!out) throw IoError("failed to write trajectory");
}

/// Writes .csv as CSV and anything else as binary.
inline void save_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  if (path.extension() == ".csv")
    write_trajectory_csv(out, traj);
  else
    write_trajectory_binary(out, traj);
}

inline Trajectory load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return read_trajectory_binary(in);
}

}  // namespace msc
