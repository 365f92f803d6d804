#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sqfit/errors.hpp"
#include "sqfit/random.hpp"
#include "sqfit/scalar.hpp"

namespace sqfit {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::size_t, 3>> triangles;

  double triangle_area(std::size_t t) const {
    const auto& f = triangles[t];
    return 0.5 * (vertices[f[1]] - vertices[f[0]]).cross(vertices[f[2]] - vertices[f[0]]).norm();
  }
};

/// A target shape: surface points, plus the mesh when one was loaded.
struct TargetShape {
  std::vector<Vec3> points;
  std::optional<TriangleMesh> mesh;
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t j = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > j) out.push_back(line.substr(j, i - j));
  }
  return out;
}

inline double parse_double(std::string_view tok, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v))
    throw ParseError("invalid number '" + std::string(tok) + "'", line);
  return v;
}

inline long parse_long(std::string_view tok, std::size_t line) {
  long v = 0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw ParseError("invalid index '" + std::string(tok) + "'", line);
  return v;
}

}  // namespace detail

/// Wavefront OBJ subset: `v` and `f` records. Faces with more than three
/// vertices are fan-triangulated; `v/vt/vn` and negative indices are accepted.
inline TriangleMesh parse_obj(std::istream& in) {
  TriangleMesh mesh;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const auto tok = detail::split_ws(std::string_view(line).substr(0, hash));
    if (tok.empty()) continue;
    if (tok[0] == "v") {
      if (tok.size() < 4) throw ParseError("vertex needs three coordinates", lineno);
      mesh.vertices.emplace_back(detail::parse_double(tok[1], lineno), detail::parse_double(tok[2], lineno),
                                 detail::parse_double(tok[3], lineno));
    } else if (tok[0] == "f") {
      if (tok.size() < 4) throw NonTriangulatable("face with fewer than three vertices on line " + std::to_string(lineno));
      std::vector<std::size_t> idx;
      for (std::size_t k = 1; k < tok.size(); ++k) {
        const long raw = detail::parse_long(tok[k].substr(0, tok[k].find('/')), lineno);
        const long n = static_cast<long>(mesh.vertices.size());
        const long i = raw > 0 ? raw - 1 : n + raw;
        if (raw == 0 || i < 0 || i >= n) throw ParseError("face index out of range", lineno);
        idx.push_back(static_cast<std::size_t>(i));
      }
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) mesh.triangles.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  if (mesh.triangles.empty()) throw EmptyMesh("mesh has no faces");
  return mesh;
}

/// Whitespace-separated x y z per line; blank lines and `#` comments skipped.
inline std::vector<Vec3> parse_xyz(std::istream& in) {
  std::vector<Vec3> pts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tok = detail::split_ws(std::string_view(line).substr(0, line.find('#')));
    if (tok.empty()) continue;
    if (tok.size() != 3) throw ParseError("expected three coordinates", lineno);
    pts.emplace_back(detail::parse_double(tok[0], lineno), detail::parse_double(tok[1], lineno),
                     detail::parse_double(tok[2], lineno));
  }
  if (pts.empty()) throw ParseError("no points", lineno);
  return pts;
}

/// `count` points distributed uniformly by area over the mesh surface.
inline std::vector<Vec3> sample_surface(const TriangleMesh& mesh, std::size_t count, std::uint64_t seed) {
  std::vector<double> cumulative;
  cumulative.reserve(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    total += mesh.triangle_area(t);
    cumulative.push_back(total);
  }
  if (!(total > 0.0)) throw EmptyMesh("mesh has zero surface area");
  Rng rng(seed);
  std::vector<Vec3> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double r = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    if (it == cumulative.end()) --it;
    const auto& f = mesh.triangles[static_cast<std::size_t>(it - cumulative.begin())];
    const double r1 = std::sqrt(rng.uniform());
    const double r2 = rng.uniform();
    out.push_back((1.0 - r1) * mesh.vertices[f[0]] + r1 * (1.0 - r2) * mesh.vertices[f[1]] +
                  r1 * r2 * mesh.vertices[f[2]]);
  }
  return out;
}

/// Ray parameter of the hit of ray (o, d) with a triangle, if any (Moller-Trumbore).
inline std::optional<double> ray_triangle(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 p = d.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-14) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 s = o - a;
  const double u = s.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 q = s.cross(e1);
  const double v = d.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  const double t = e2.dot(q) * inv;
  if (t <= 0.0) return std::nullopt;
  return t;
}

/// Inside test by crossing parity along +x, majority of three slightly tilted
/// rays so a ray grazing an edge cannot flip the answer.
inline bool mesh_contains(const TriangleMesh& mesh, const Vec3& p) {
  static const Vec3 dirs[3] = {Vec3(1.0, 1.3e-4, 2.9e-4).normalized(), Vec3(1.0, -3.1e-4, 1.7e-4).normalized(),
                               Vec3(1.0, 2.3e-4, -3.7e-4).normalized()};
  int votes = 0;
  for (const auto& d : dirs) {
    int hits = 0;
    for (const auto& f : mesh.triangles)
      if (ray_triangle(p, d, mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]])) ++hits;
    votes += hits % 2;
  }
  return votes >= 2;
}

inline constexpr std::size_t kTargetSamples = 2000;

inline bool has_extension(const std::string& path, std::string_view ext) {
  if (path.size() < ext.size()) return false;
  std::string tail = path.substr(path.size() - ext.size());
  std::transform(tail.begin(), tail.end(), tail.begin(), [](unsigned char c) { return std::tolower(c); });
  return tail == ext;
}

/// Loads an OBJ mesh (sampled to `samples` surface points) or an XYZ point list.
inline TargetShape load_target(const std::string& path, std::uint64_t seed = 0,
                               std::size_t samples = kTargetSamples) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  TargetShape t;
  if (has_extension(path, ".obj")) {
    t.mesh = parse_obj(in);
    t.points = sample_surface(*t.mesh, samples, seed);
  } else {
    t.points = parse_xyz(in);
  }
  return t;
}

}  // namespace sqfit
