#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <vector>

#include "sqfit/gradcheck.hpp"
#include "sqfit/mesh.hpp"
#include "sqfit/model.hpp"
#include "sqfit/random.hpp"
#include "sqfit/sampling.hpp"

namespace sqfit::synthetic {

/// Tapered, bent superquadric with a random pose.
struct RecoveryInstance {
  Primitive truth;
  std::vector<Vec3> points;
};

inline RecoveryInstance recovery_instance(std::uint64_t seed, std::size_t count = 2000) {
  Rng rng(seed);
  RecoveryInstance out;
  auto& g = out.truth.shape;
  g.scale = Vec3(0.8, 0.4, 0.3);
  g.squareness = Vec2(0.6, 1.2);
  g.taper = Vec2(0.3, 0.0);
  g.bend = 0.4;
  out.truth.pose.rotation = detail::random_rotation(rng);
  out.truth.pose.translation = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  std::vector<SurfaceAngle> angles;
  angles.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double eta = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
    const double omega = rng.uniform(-std::numbers::pi, std::numbers::pi);
    angles.push_back({detail::equal_direction_angle(eta, g.squareness[0]),
                      detail::equal_direction_angle(omega, g.squareness[1])});
  }
  out.points = world_transform(out.truth.pose, global_surface(g, angles));
  return out;
}

struct Box {
  Vec3 lo;
  Vec3 hi;

  bool contains(const Vec3& p) const { return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all(); }
};

inline void add_box(TriangleMesh& m, const Box& b) {
  const std::size_t o = m.vertices.size();
  for (int k = 0; k < 8; ++k)
    m.vertices.emplace_back(k & 1 ? b.hi.x() : b.lo.x(), k & 2 ? b.hi.y() : b.lo.y(), k & 4 ? b.hi.z() : b.lo.z());
  // Outward-facing quads.
  const int quads[6][4] = {{0, 2, 3, 1}, {4, 5, 7, 6}, {0, 1, 5, 4}, {2, 6, 7, 3}, {0, 4, 6, 2}, {1, 3, 7, 5}};
  for (const auto& q : quads) {
    m.triangles.push_back({o + q[0], o + q[1], o + q[2]});
    m.triangles.push_back({o + q[0], o + q[2], o + q[3]});
  }
}

/// Four legs, a seat and a back; the first four boxes are the legs.
inline std::array<Box, 6> chair_boxes() {
  std::array<Box, 6> b;
  int i = 0;
  for (int sx : {-1, 1})
    for (int sy : {-1, 1}) {
      const Vec3 c(sx * 0.34, sy * 0.34, 0.0);
      b[i++] = {c + Vec3(-0.04, -0.04, 0.0), c + Vec3(0.04, 0.04, 0.45)};
    }
  b[4] = {Vec3(-0.4, -0.4, 0.45), Vec3(0.4, 0.4, 0.53)};
  b[5] = {Vec3(-0.4, 0.32, 0.53), Vec3(0.4, 0.4, 1.0)};
  return b;
}

inline TriangleMesh chair_mesh() {
  TriangleMesh m;
  for (const auto& b : chair_boxes()) add_box(m, b);
  return m;
}

inline bool chair_contains(const Vec3& p) {
  for (const auto& b : chair_boxes())
    if (b.contains(p)) return true;
  return false;
}

}  // namespace sqfit::synthetic
