#pragma once

// Scene configuration (JSON, "version": 1) and keyframed charge tracks.
// The schema is documented in README.md. Keys ending in _uC are microcoulombs;
// everything else is SI.

#include "msc/expression.hpp"
#include "msc/generators.hpp"
#include "msc/integrators.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace msc {

using Json = nlohmann::ordered_json;

struct ChargeTrack {
  std::string group;
  std::vector<std::pair<double, double>> keys;  // (time s, charge C), strictly increasing times

  double at(double t) const {
    if (t <= keys.front().first) return keys.front().second;
    if (t >= keys.back().first) return keys.back().second;
    auto hi = std::upper_bound(keys.begin(), keys.end(), t,
                               [](double v, const std::pair<double, double>& k) { return v < k.first; });
    auto lo = hi - 1;
    const double a = (t - lo->first) / (hi->first - lo->first);
    return lo->second + a * (hi->second - lo->second);
  }
};

struct Scene {
  std::string name;
  Model model;
  SimState initial;
  SimParams params;
  IntegratorKind integrator = IntegratorKind::Imex;
  long steps = 0;
  int record_every = 1;
  std::map<std::string, std::vector<int>> groups;
  std::vector<ChargeTrack> tracks;
  std::vector<std::string> warnings;

  Eigen::Index vertex_count() const { return model.vertex_count(); }

  const std::vector<int>& group(const std::string& g) const {
    auto it = groups.find(g);
    if (it == groups.end()) throw ConfigError("unknown vertex group '" + g + "'");
    return it->second;
  }
};

/// Base charges with every track evaluated at t; later tracks win on overlap.
inline ChargeSet charge_at_time(const Scene& scene, double t) {
  ChargeSet c = scene.model.charges;
  for (const ChargeTrack& tr : scene.tracks) {
    const double q = tr.at(t);
    for (int v : scene.group(tr.group)) c.charges[v] = q;
  }
  return c;
}

inline ChargeSchedule make_schedule(const Scene& scene) {
  if (scene.tracks.empty()) return {};
  return [scene](double t) { return charge_at_time(scene, t).charges; };
}

namespace detail {

class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {}

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(path_ + (key.empty() ? "" : "." + key) + ": " + msg);
  }
  bool has(const std::string& key) const { return j_.is_object() && j_.contains(key); }
  const Json& raw(const std::string& key) const { return j_.at(key); }
  std::string path(const std::string& key) const { return path_ + "." + key; }

  double number(const std::string& key) const {
    if (!has(key)) fail(key, "missing");
    const Json& v = j_.at(key);
    if (!v.is_number()) fail(key, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) fail(key, "must be finite");
    return d;
  }
  double number(const std::string& key, double fallback) const { return has(key) ? number(key) : fallback; }

  long integer(const std::string& key, long fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_number_integer()) fail(key, "expected an integer");
    return v.get<long>();
  }

  std::string string(const std::string& key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    return v.get<bool>();
  }

  Vec3 vec3(const std::string& key, const Vec3& fallback) const {
    if (!has(key)) return fallback;
    return to_vec3(j_.at(key), path(key));
  }

  static Vec3 to_vec3(const Json& v, const std::string& where) {
    if (!v.is_array() || v.size() != 3) throw ConfigError(where + ": expected [x, y, z]");
    Vec3 out;
    for (int d = 0; d < 3; ++d) {
      if (!v[static_cast<std::size_t>(d)].is_number()) throw ConfigError(where + ": expected numbers");
      out[d] = v[static_cast<std::size_t>(d)].get<double>();
    }
    return out;
  }

  std::vector<double> numbers(const std::string& key) const {
    const Json& v = j_.at(key);
    if (!v.is_array()) fail(key, "expected an array of numbers");
    std::vector<double> out;
    for (const Json& e : v) {
      if (!e.is_number()) fail(key, "expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::vector<int> indices(const std::string& key) const {
    const Json& v = j_.at(key);
    if (!v.is_array()) fail(key, "expected an array of indices");
    std::vector<int> out;
    for (const Json& e : v) {
      if (!e.is_number_integer()) fail(key, "expected an array of indices");
      out.push_back(e.get<int>());
    }
    return out;
  }

 private:
  const Json& j_;
  std::string path_;
};

inline MeshSource generate_mesh(const Json& j, const std::filesystem::path& base_dir) {
  Reader r(j, "mesh");
  if (r.has("path")) {
    const std::filesystem::path p = base_dir / r.string("path", "");
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read mesh file " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_mesh(ss.str());
  }
  const std::string gen = r.string("generator", "");
  const int neighbours = static_cast<int>(r.integer("neighbours", 6));
  if (gen == "torus")
    return gen::torus(r.number("major_radius"), r.number("minor_radius"), static_cast<int>(r.integer("rings", 29)),
                      static_cast<int>(r.integer("segments", 5)));
  if (gen == "sphere")
    return gen::sphere(static_cast<int>(r.integer("count", 500)), r.number("radius"), neighbours);
  if (gen == "blob")
    return gen::blob(static_cast<int>(r.integer("count", 300)), r.vec3("semi_axes", Vec3::Ones()),
                     r.number("bump", 0.15), neighbours);
  if (gen == "cloud") {
    MeshSource m = gen::cloud(static_cast<int>(r.integer("count", 1000)), r.number("size"),
                              static_cast<std::uint64_t>(r.integer("seed", 7)));
    if (neighbours > 0) gen::connect_nearest(m, neighbours);
    return m;
  }
  if (gen == "sheet")
    return gen::sheet(static_cast<int>(r.integer("nx", 20)), static_cast<int>(r.integer("nz", 20)), r.number("width"),
                      r.number("height"));
  r.fail("generator", "unknown generator '" + gen + "' (torus, sphere, blob, cloud, sheet, or give a path)");
}

}  // namespace detail

/// Builds a scene from a JSON document. Relative mesh paths resolve against base_dir.
inline Scene parse_scene_config(std::string_view text, const std::filesystem::path& base_dir = ".") {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("scene: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("scene: expected a JSON object");
  detail::Reader r(j, "scene");
  if (r.integer("version", -1) != 1) r.fail("version", "must be 1");

  Scene sc;
  sc.name = r.string("name", "scene");
  const double kc = r.number("coulomb_constant", kCoulombConstant);
  if (!(kc > 0.0)) r.fail("coulomb_constant", "must be > 0");

  // Geometry and springs: either explicit arrays or a mesh source.
  MeshSource mesh;
  const bool explicit_form = r.has("vertices");
  if (explicit_form) {
    const Json& vs = r.raw("vertices");
    if (!vs.is_array() || vs.empty()) r.fail("vertices", "expected a non-empty array of [x, y, z]");
    for (std::size_t i = 0; i < vs.size(); ++i)
      mesh.vertices.push_back(detail::Reader::to_vec3(vs[i], r.path("vertices") + "[" + std::to_string(i) + "]"));
  } else {
    if (!r.has("mesh")) r.fail("mesh", "missing (give \"mesh\" or explicit \"vertices\")");
    mesh = detail::generate_mesh(r.raw("mesh"), base_dir);
    for (const std::string& w : mesh.warnings) sc.warnings.push_back(w);
  }
  const Eigen::Index n = static_cast<Eigen::Index>(mesh.vertices.size());
  if (n < 1) r.fail("mesh", "has no vertices");
  const Vec3 offset = r.vec3("offset", Vec3::Zero());
  for (Vec3& v : mesh.vertices) v += offset;

  if (r.has("springs")) {
    const Json& ss = r.raw("springs");
    if (!ss.is_array()) r.fail("springs", "expected an array of [i, j, k, rest_length]");
    sc.model.topology.vertex_count = static_cast<int>(n);
    for (std::size_t s = 0; s < ss.size(); ++s) {
      const Json& e = ss[s];
      const std::string where = r.path("springs") + "[" + std::to_string(s) + "]";
      if (!e.is_array() || e.size() != 4 || !e[0].is_number_integer() || !e[1].is_number_integer() ||
          !e[2].is_number() || !e[3].is_number())
        throw ConfigError(where + ": expected [i, j, k, rest_length]");
      sc.model.topology.springs.push_back({e[0].get<int>(), e[1].get<int>(), e[2].get<double>(), e[3].get<double>()});
    }
  } else {
    const double k = r.number("k");
    if (!(k > 0.0)) r.fail("k", "must be > 0");
    sc.model.topology = springs_from_mesh(mesh, k);
  }
  try {
    sc.model.topology.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("scene.springs: ") + e.what());
  }

  // Masses.
  if (r.has("masses")) {
    const std::vector<double> m = r.numbers("masses");
    if (static_cast<Eigen::Index>(m.size()) != n) r.fail("masses", "needs one entry per vertex");
    sc.model.masses.masses = Eigen::Map<const VecX>(m.data(), n);
  } else {
    sc.model.masses = MassModel::uniform(n, r.number("mass", 1.0));
  }
  try {
    sc.model.masses.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("scene.mass: ") + e.what());
  }

  // Groups: mesh groups first, then config groups (which may override).
  sc.groups = mesh.groups;
  if (r.has("groups")) {
    const Json& g = r.raw("groups");
    if (!g.is_object()) r.fail("groups", "expected an object of name: [indices]");
    detail::Reader gr(g, r.path("groups"));
    for (auto it = g.begin(); it != g.end(); ++it) sc.groups[it.key()] = gr.indices(it.key());
  }
  if (r.has("split_groups")) {
    const Json& sg = r.raw("split_groups");
    detail::Reader sr(sg, r.path("split_groups"));
    MeshSource tmp;
    tmp.vertices = mesh.vertices;
    gen::split_groups(tmp, static_cast<int>(sr.integer("axis", 0)), sr.string("low", "low"), sr.string("high", "high"));
    for (auto& [name, idx] : tmp.groups) sc.groups[name] = idx;
  }
  for (auto& [name, idx] : sc.groups)
    for (int v : idx)
      if (v < 0 || v >= n) throw ConfigError("scene.groups." + name + ": vertex index " + std::to_string(v) + " out of range");
  sc.groups["all"].clear();
  for (Eigen::Index i = 0; i < n; ++i) sc.groups["all"].push_back(static_cast<int>(i));

  // Charges: per-vertex SI array, or a uniform value overridden per group.
  sc.model.charges.coulomb_constant = kc;
  if (r.has("charges")) {
    const std::vector<double> q = r.numbers("charges");
    if (static_cast<Eigen::Index>(q.size()) != n) r.fail("charges", "needs one entry per vertex");
    sc.model.charges.charges = Eigen::Map<const VecX>(q.data(), n);
  } else {
    sc.model.charges.charges = VecX::Constant(n, r.number("q_uC", 0.0) * kMicroCoulomb);
  }
  if (r.has("group_charges_uC")) {
    const Json& g = r.raw("group_charges_uC");
    if (!g.is_object()) r.fail("group_charges_uC", "expected an object of group: value");
    detail::Reader gr(g, r.path("group_charges_uC"));
    for (auto it = g.begin(); it != g.end(); ++it) {
      const double q = gr.number(it.key()) * kMicroCoulomb;
      for (int v : sc.group(it.key())) sc.model.charges.charges[v] = q;
    }
  }

  // Keyframed tracks.
  if (r.has("charge_tracks")) {
    const Json& ts = r.raw("charge_tracks");
    if (!ts.is_array()) r.fail("charge_tracks", "expected an array");
    std::vector<char> covered(static_cast<std::size_t>(n), 0);
    for (std::size_t k = 0; k < ts.size(); ++k) {
      detail::Reader tr(ts[k], r.path("charge_tracks") + "[" + std::to_string(k) + "]");
      ChargeTrack track;
      track.group = tr.string("group", "");
      if (!sc.groups.count(track.group)) tr.fail("group", "unknown vertex group '" + track.group + "'");
      const bool si = tr.has("keys");
      const std::string key = si ? "keys" : "keys_uC";
      if (!tr.has(key)) tr.fail("keys_uC", "missing");
      const Json& keys = ts[k].at(key);
      if (!keys.is_array() || keys.empty()) tr.fail(key, "expected [[time, charge], ...]");
      for (const Json& kv : keys) {
        if (!kv.is_array() || kv.size() != 2 || !kv[0].is_number() || !kv[1].is_number())
          tr.fail(key, "expected [[time, charge], ...]");
        const double t = kv[0].get<double>();
        const double q = kv[1].get<double>() * (si ? 1.0 : kMicroCoulomb);
        if (!track.keys.empty() && !(t > track.keys.back().first)) tr.fail(key, "times must be strictly increasing");
        track.keys.emplace_back(t, q);
      }
      bool overlap = false;
      for (int v : sc.group(track.group)) {
        overlap = overlap || covered[static_cast<std::size_t>(v)];
        covered[static_cast<std::size_t>(v)] = 1;
      }
      if (overlap)
        sc.warnings.push_back("charge track for group '" + track.group +
                              "' overlaps an earlier track; the later track wins");
      sc.tracks.push_back(std::move(track));
    }
  }

  // Pinned vertices.
  if (r.has("pinned")) {
    for (int v : r.indices("pinned")) {
      if (v < 0 || v >= n) r.fail("pinned", "vertex index out of range");
      sc.model.pinned.push_back(v);
    }
  }
  if (r.has("pinned_groups")) {
    const Json& pg = r.raw("pinned_groups");
    if (!pg.is_array()) r.fail("pinned_groups", "expected an array of group names");
    for (const Json& g : pg) {
      if (!g.is_string()) r.fail("pinned_groups", "expected group names");
      for (int v : sc.group(g.get<std::string>())) sc.model.pinned.push_back(v);
    }
  }
  std::sort(sc.model.pinned.begin(), sc.model.pinned.end());
  sc.model.pinned.erase(std::unique(sc.model.pinned.begin(), sc.model.pinned.end()), sc.model.pinned.end());

  // External forcing.
  if (r.has("constant_force")) {
    const std::vector<double> f = r.numbers("constant_force");
    if (f.size() == 3) {
      sc.model.forcing.constant_force = VecX(3 * n);
      for (Eigen::Index i = 0; i < n; ++i) sc.model.forcing.constant_force.segment<3>(3 * i) = Vec3(f[0], f[1], f[2]);
    } else if (static_cast<Eigen::Index>(f.size()) == 3 * n) {
      sc.model.forcing.constant_force = Eigen::Map<const VecX>(f.data(), 3 * n);
    } else {
      r.fail("constant_force", "expected [fx, fy, fz] or 3n entries");
    }
  }
  if (r.has("field")) {
    const Json& f = r.raw("field");
    if (!f.is_array() || f.size() != 3 || !f[0].is_string() || !f[1].is_string() || !f[2].is_string())
      r.fail("field", "expected three expression strings");
    for (int d = 0; d < 3; ++d) sc.model.forcing.field_expression[d] = f[static_cast<std::size_t>(d)].get<std::string>();
    try {
      sc.model.forcing.field = make_field(sc.model.forcing.field_expression[0], sc.model.forcing.field_expression[1],
                                          sc.model.forcing.field_expression[2]);
    } catch (const ConfigError& e) {
      r.fail("field", e.what());
    }
  }
  if (r.has("external_charges")) {
    const Json& ec = r.raw("external_charges");
    if (!ec.is_array()) r.fail("external_charges", "expected an array");
    for (std::size_t k = 0; k < ec.size(); ++k) {
      detail::Reader er(ec[k], r.path("external_charges") + "[" + std::to_string(k) + "]");
      ExternalCharge e;
      e.id = static_cast<int>(er.integer("id", static_cast<long>(k)));
      e.position = er.vec3("position", Vec3::Zero());
      e.charge = er.has("q") ? er.number("q") : er.number("q_uC") * kMicroCoulomb;
      sc.model.forcing.external_charges.push_back(e);
    }
  }

  // Simulation parameters.
  SimParams& p = sc.params;
  p.h = r.number("h", p.h);
  if (!(p.h > 0.0)) r.fail("h", "must be > 0");
  p.local_global_iterations = static_cast<int>(r.integer("local_global_iterations", p.local_global_iterations));
  p.local_global_tolerance = r.number("local_global_tolerance", p.local_global_tolerance);
  const std::string forces = r.string("forces", "brute");
  if (forces != "brute" && forces != "ddef") r.fail("forces", "expected brute or ddef");
  p.ddef_enabled = forces == "ddef";
  p.ddef_m = static_cast<int>(r.integer("m", p.ddef_m));
  p.reuse_grid_frames = static_cast<int>(r.integer("reuse_grid_frames", p.reuse_grid_frames));
  p.ddef_overlap_correction = r.boolean("ddef_overlap_correction", p.ddef_overlap_correction);
  p.softening_epsilon = r.number("softening_epsilon", p.softening_epsilon);
  p.gravity = r.vec3("gravity", p.gravity);
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  try {
    sc.integrator = parse_integrator(r.string("integrator", "imex"));
  } catch (const ConfigError& e) {
    r.fail("integrator", e.what());
  }
  sc.steps = r.integer("steps", 0);
  if (sc.steps < 0) r.fail("steps", "must be >= 0");
  sc.record_every = static_cast<int>(r.integer("record_every", 1));
  if (sc.record_every < 1) r.fail("record_every", "must be >= 1");

  // Initial state.
  VecX x = mesh.stacked_positions();
  VecX v = VecX::Zero(3 * n);
  if (r.has("velocities")) {
    const std::vector<double> vv = r.numbers("velocities");
    if (static_cast<Eigen::Index>(vv.size()) != 3 * n) r.fail("velocities", "needs 3n entries");
    v = Eigen::Map<const VecX>(vv.data(), 3 * n);
  } else if (r.has("initial_velocity")) {
    const Vec3 v0 = r.vec3("initial_velocity", Vec3::Zero());
    for (Eigen::Index i = 0; i < n; ++i) v.segment<3>(3 * i) = v0;
  }
  for (int pv : sc.model.pinned) v.segment<3>(3 * pv).setZero();
  sc.initial = SimState::from_positions(x, v, p.h);
  if (!sc.tracks.empty()) sc.model.charges = charge_at_time(sc, 0.0);
  return sc;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Scene load_scene(const std::filesystem::path& path) {
  return parse_scene_config(read_text_file(path), path.parent_path());
}

/// Writes a scene in explicit form (vertices, springs, per-vertex masses and charges).
inline std::string serialize_scene(const Scene& sc) {
  Json j;
  j["version"] = 1;
  j["name"] = sc.name;
  const Eigen::Index n = sc.vertex_count();
  Json verts = Json::array();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 x = sc.initial.positions.segment<3>(3 * i);
    verts.push_back({x.x(), x.y(), x.z()});
  }
  j["vertices"] = verts;
  Json springs = Json::array();
  for (const Spring& s : sc.model.topology.springs) springs.push_back({s.i, s.j, s.k, s.rest_length});
  j["springs"] = springs;
  j["masses"] = std::vector<double>(sc.model.masses.masses.data(), sc.model.masses.masses.data() + n);
  j["charges"] = std::vector<double>(sc.model.charges.charges.data(), sc.model.charges.charges.data() + n);
  j["coulomb_constant"] = sc.model.charges.coulomb_constant;
  Json groups = Json::object();
  for (const auto& [name, idx] : sc.groups)
    if (name != "all") groups[name] = idx;
  j["groups"] = groups;
  if (!sc.tracks.empty()) {
    Json tracks = Json::array();
    for (const ChargeTrack& t : sc.tracks) {
      Json keys = Json::array();
      for (const auto& [time, q] : t.keys) keys.push_back({time, q});
      tracks.push_back({{"group", t.group}, {"keys", keys}});
    }
    j["charge_tracks"] = tracks;
  }
  if (!sc.model.pinned.empty()) j["pinned"] = sc.model.pinned;
  if (sc.model.forcing.constant_force.size() == 3 * n)
    j["constant_force"] = std::vector<double>(sc.model.forcing.constant_force.data(),
                                              sc.model.forcing.constant_force.data() + 3 * n);
  if (sc.model.forcing.has_field())
    j["field"] = {sc.model.forcing.field_expression[0], sc.model.forcing.field_expression[1],
                  sc.model.forcing.field_expression[2]};
  if (!sc.model.forcing.external_charges.empty()) {
    Json ec = Json::array();
    for (const ExternalCharge& e : sc.model.forcing.external_charges)
      ec.push_back({{"id", e.id}, {"position", {e.position.x(), e.position.y(), e.position.z()}}, {"q", e.charge}});
    j["external_charges"] = ec;
  }
  const SimParams& p = sc.params;
  j["h"] = p.h;
  j["local_global_iterations"] = p.local_global_iterations;
  j["local_global_tolerance"] = p.local_global_tolerance;
  j["forces"] = p.ddef_enabled ? "ddef" : "brute";
  j["m"] = p.ddef_m;
  j["reuse_grid_frames"] = p.reuse_grid_frames;
  j["ddef_overlap_correction"] = p.ddef_overlap_correction;
  j["softening_epsilon"] = p.softening_epsilon;
  j["gravity"] = {p.gravity.x(), p.gravity.y(), p.gravity.z()};
  j["integrator"] = to_string(sc.integrator);
  j["steps"] = sc.steps;
  j["record_every"] = sc.record_every;
  j["velocities"] = std::vector<double>(sc.initial.velocities.data(), sc.initial.velocities.data() + 3 * n);
  return j.dump(2);
}

inline RolloutOptions rollout_options(const Scene& sc) {
  RolloutOptions o;
  o.kind = sc.integrator;
  o.steps = sc.steps;
  o.record_every = sc.record_every;
  o.schedule = make_schedule(sc);
  return o;
}

inline Simulator make_simulator(const Scene& sc) {
  Simulator sim(sc.model, sc.params, sc.integrator, sc.initial);
  if (!sc.tracks.empty()) sim.set_charge_schedule(make_schedule(sc));
  return sim;
}

}  // namespace msc
