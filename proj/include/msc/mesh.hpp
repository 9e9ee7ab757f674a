#pragma once

// Text mesh input (a Wavefront OBJ subset) and spring generation from edges.
//
//   v x y z        vertex
//   f a b c ...    polygon; each boundary edge becomes an edge
//   l a b ...      polyline; consecutive pairs become edges
//   g name         following f/l lines add their vertices to group `name`
//   # ...          comment
//
// Indices are 1-based; negative indices count back from the last vertex.
// "a/b/c" index forms are accepted and only the position index is used.

#include "msc/types.hpp"

#include <charconv>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

namespace msc {

struct MeshSource {
  std::vector<Vec3> vertices;
  std::vector<std::pair<int, int>> edges;  // undirected, i < j, sorted, unique
  std::map<std::string, std::vector<int>> groups;
  std::vector<std::string> warnings;

  VecX stacked_positions() const {
    VecX x(3 * static_cast<Eigen::Index>(vertices.size()));
    for (std::size_t i = 0; i < vertices.size(); ++i) x.segment<3>(3 * static_cast<Eigen::Index>(i)) = vertices[i];
    return x;
  }
};

namespace detail {

inline double parse_double(std::string_view tok, std::size_t line) {
  double v = 0.0;
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v))
    throw ConfigError("mesh line " + std::to_string(line) + ": malformed number '" + std::string(tok) + "'");
  return v;
}

inline int parse_index(std::string_view tok, std::size_t line, std::size_t vertex_count) {
  const auto slash = tok.find('/');
  if (slash != std::string_view::npos) tok = tok.substr(0, slash);
  long v = 0;
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, v);
  if (ec != std::errc() || ptr != end || v == 0)
    throw ConfigError("mesh line " + std::to_string(line) + ": malformed index '" + std::string(tok) + "'");
  const long idx = v > 0 ? v - 1 : static_cast<long>(vertex_count) + v;
  if (idx < 0 || idx >= static_cast<long>(vertex_count))
    throw ConfigError("mesh line " + std::to_string(line) + ": index " + std::to_string(v) + " out of range");
  return static_cast<int>(idx);
}

inline void finalize_edges(std::vector<std::pair<int, int>>& edges) {
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
}

}  // namespace detail

inline MeshSource parse_mesh(std::string_view text) {
  MeshSource mesh;
  std::set<std::pair<int, int>> edges;
  std::string group;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  auto add_edge = [&](int a, int b) {
    if (a == b) return;
    edges.emplace(std::min(a, b), std::max(a, b));
  };
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::vector<std::string_view> toks;
    std::size_t p = 0;
    while (p < line.size()) {
      while (p < line.size() && (line[p] == ' ' || line[p] == '\t')) ++p;
      const std::size_t s = p;
      while (p < line.size() && line[p] != ' ' && line[p] != '\t') ++p;
      if (p > s) toks.push_back(line.substr(s, p - s));
    }
    if (toks.empty() || toks[0].front() == '#') continue;
    const std::string_view kw = toks[0];
    if (kw == "v") {
      if (toks.size() < 4) throw ConfigError("mesh line " + std::to_string(line_no) + ": vertex needs 3 coordinates");
      mesh.vertices.emplace_back(detail::parse_double(toks[1], line_no), detail::parse_double(toks[2], line_no),
                                 detail::parse_double(toks[3], line_no));
    } else if (kw == "f" || kw == "l") {
      std::vector<int> idx;
      for (std::size_t t = 1; t < toks.size(); ++t)
        idx.push_back(detail::parse_index(toks[t], line_no, mesh.vertices.size()));
      if (idx.size() < 2) throw ConfigError("mesh line " + std::to_string(line_no) + ": element needs 2+ indices");
      for (std::size_t t = 0; t + 1 < idx.size(); ++t) add_edge(idx[t], idx[t + 1]);
      if (kw == "f" && idx.size() > 2) add_edge(idx.back(), idx.front());
      if (!group.empty()) {
        auto& g = mesh.groups[group];
        g.insert(g.end(), idx.begin(), idx.end());
      }
    } else if (kw == "g" || kw == "o") {
      group = toks.size() > 1 ? std::string(toks[1]) : std::string();
    } else {
      mesh.warnings.push_back("mesh line " + std::to_string(line_no) + ": skipped directive '" + std::string(kw) + "'");
    }
  }
  mesh.edges.assign(edges.begin(), edges.end());
  for (auto& [name, g] : mesh.groups) {
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end()), g.end());
  }
  return mesh;
}

inline std::string write_mesh(const MeshSource& mesh) {
  std::ostringstream out;
  out.precision(17);
  for (const Vec3& v : mesh.vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const auto& [a, b] : mesh.edges) out << "l " << a + 1 << ' ' << b + 1 << '\n';
  return out.str();
}

/// One spring per edge, rest length = initial edge length.
inline SpringTopology springs_from_mesh(const MeshSource& mesh, double default_k) {
  if (!(default_k > 0.0)) throw std::invalid_argument("springs_from_mesh: k must be > 0");
  SpringTopology topo;
  topo.vertex_count = static_cast<int>(mesh.vertices.size());
  topo.springs.reserve(mesh.edges.size());
  for (const auto& [a, b] : mesh.edges) {
    const double len = (mesh.vertices[static_cast<std::size_t>(a)] - mesh.vertices[static_cast<std::size_t>(b)]).norm();
    topo.springs.push_back({a, b, default_k, len});
  }
  return topo;
}

}  // namespace msc
