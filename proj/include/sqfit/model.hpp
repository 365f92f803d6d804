#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "sqfit/geometry.hpp"
#include "sqfit/local_deform.hpp"
#include "sqfit/sampling.hpp"

namespace sqfit {

/// Full parameter set q = (q_c, q_theta, q_s, q_d) of one primitive.
struct Primitive {
  PrimitivePose pose;
  GlobalShapeParams shape;
  VelocityGrid grid;  // raw (pre-smoothing) velocity values
};

/// Uniform scale and offset mapping input coordinates into the unit cube.
struct Normalization {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return (p - center) * scale; }
  Vec3 revert(const Vec3& p) const { return p / scale + center; }
};

struct LossRecord {
  double total = 0.0;
  double ext = 0.0;
  double gen = 0.0;
  double sigma = 0.0;
  double icc = 0.0;
};

struct FitState {
  std::vector<Primitive> primitives;
  std::optional<CameraParams> camera;
  Normalization normalization;
  int iteration = 0;
  std::vector<LossRecord> trace;
};

/// Default viewing camera: positioned at distance `distance` on +z, looking
/// down -z (a half turn about y), so camera depth is distance - z.
inline CameraParams default_camera(double distance = 2.5, double focal_length = 2.0) {
  CameraParams cam;
  cam.rotation = {0.0, 0.0, 1.0, 0.0};
  cam.translation = Vec3(0.0, 0.0, distance);
  cam.focal_length = focal_length;
  return cam;
}

/// Points sampled on the fully deformed primitive, in world coordinates.
struct PrimitiveSample {
  std::vector<SurfaceAngle> angles;
  std::vector<Vec3> surface;  // s, after global deformation
  std::vector<Vec3> model;    // p = s + d
  std::vector<Vec3> world;    // x = c + R p
};

inline PrimitiveSample sample_primitive(const Primitive& prim, const DisplacementField& field,
                                        std::vector<SurfaceAngle> angles) {
  PrimitiveSample out;
  out.angles = std::move(angles);
  const auto q = prim.shape.packed();
  const Mat3 r = prim.pose.rotation.rotation_matrix();
  const bool local = !field.is_zero();
  for (const auto& a : out.angles) {
    const Vec3 s = kernel::global_surface<double>(std::span<const double, 8>(q), a).s;
    const Vec3 p = local ? Vec3(s + field.sample(s)) : s;
    out.surface.push_back(s);
    out.model.push_back(p);
    out.world.push_back(prim.pose.translation + r * p);
  }
  return out;
}

inline PrimitiveSample sample_primitive(const Primitive& prim, std::size_t count, int svf_steps = 7) {
  return sample_primitive(prim, flow(prim.grid, svf_steps), surface_angles(prim.shape.squareness, count));
}

/// World-space samples of every primitive, concatenated.
inline std::vector<Vec3> sample_state(const FitState& state, std::size_t per_primitive, int svf_steps = 7) {
  std::vector<Vec3> out;
  for (const auto& prim : state.primitives) {
    auto s = sample_primitive(prim, per_primitive, svf_steps);
    out.insert(out.end(), s.world.begin(), s.world.end());
  }
  return out;
}

}  // namespace sqfit
