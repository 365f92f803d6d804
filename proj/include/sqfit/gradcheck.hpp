#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "sqfit/dynamics.hpp"
#include "sqfit/model.hpp"
#include "sqfit/random.hpp"
#include "sqfit/sampling.hpp"

namespace sqfit {

/// ||a - n|| / max(||a||, ||n||), 0 when both vanish.
inline double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  const double scale = std::max(analytic.norm(), numeric.norm());
  if (scale < 1e-14) return 0.0;
  return (analytic - numeric).norm() / scale;
}

struct GradcheckOptions {
  std::uint64_t seed = 1;
  int configurations = 20;
  double step = 1e-6;
  int grid_resolution = 4;
  std::size_t points_per_primitive = 64;
  std::size_t target_points = 120;
  std::size_t silhouette_points = 80;
  std::size_t grid_probes = 24;  // velocity-grid coordinates differenced per primitive
};

/// Largest relative error seen per parameter block.
struct GradcheckResult {
  double translation = 0.0;
  double rotation = 0.0;
  double shape = 0.0;
  double grid = 0.0;
  double camera = 0.0;
  int configurations = 0;

  double max() const { return std::max({translation, rotation, shape, grid, camera}); }
};

namespace detail {

struct GradcheckCase {
  FitState state;
  std::vector<std::vector<SurfaceAngle>> angles;
  std::vector<Vec3> target;
  std::vector<Vec2> silhouette;
};

inline UnitQuaternion random_rotation(Rng& rng) {
  UnitQuaternion q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
  return q.normalized();
}

inline GradcheckCase random_case(Rng& rng, const GradcheckOptions& opt, int index) {
  GradcheckCase c;
  const int n_prim = 1 + index % 2;
  for (int p = 0; p < n_prim; ++p) {
    Primitive prim;
    prim.pose.translation = Vec3(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
    prim.pose.rotation = random_rotation(rng);
    auto& g = prim.shape;
    g.scale = Vec3(rng.uniform(0.15, 0.4), rng.uniform(0.15, 0.4), rng.uniform(0.15, 0.4));
    g.squareness = Vec2(rng.uniform(0.3, 1.8), rng.uniform(0.3, 1.8));
    g.taper = Vec2(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6));
    g.bend = rng.uniform(-0.8, 0.8) / g.scale[2];
    GridSpec spec;
    spec.resolution = opt.grid_resolution;
    prim.grid = VelocityGrid(spec);
    // Small enough that smoothing never reaches the velocity clamp.
    for (auto& v : prim.grid.values) v = Vec3(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
    c.angles.push_back(surface_angles(g.squareness, opt.points_per_primitive));
    c.state.primitives.push_back(std::move(prim));
  }
  CameraParams cam = default_camera();
  cam.translation += Vec3(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
  const UnitQuaternion tilt = UnitQuaternion::from_axis_angle(Vec3(rng.normal(), rng.normal(), rng.normal()), 0.2);
  const Eigen::Quaterniond qc = Eigen::Quaterniond(tilt.w, tilt.x, tilt.y, tilt.z) *
                                Eigen::Quaterniond(cam.rotation.w, cam.rotation.x, cam.rotation.y, cam.rotation.z);
  cam.rotation = {qc.w(), qc.x(), qc.y(), qc.z()};
  c.state.camera = cam;
  for (std::size_t i = 0; i < opt.target_points; ++i)
    c.target.emplace_back(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
  for (std::size_t i = 0; i < opt.silhouette_points; ++i)
    c.silhouette.emplace_back(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6));
  return c;
}

}  // namespace detail

/// Compares the analytic gradient of the loss selected by `coef` with central
/// differences on random states. Nearest-neighbour assignments are held at
/// their values in the unperturbed state, so both sides differentiate the same
/// smooth piece of the loss.
inline GradcheckResult run_gradcheck(const GradcheckOptions& opt, const LossCoefficients& coef) {
  GradcheckResult res;
  Rng rng(opt.seed);
  for (int ci = 0; ci < opt.configurations; ++ci) {
    auto c = detail::random_case(rng, opt, ci);
    const KdTree<3> target(c.target);
    const KdTree<2> silhouette(c.silhouette);
    LossProblem problem;
    problem.target = &target;
    problem.silhouette = &silhouette;

    Matching matching;
    const Evaluation base = evaluate_loss(c.state, c.angles, problem, coef, {}, true, &matching);
    matching.frozen = true;

    FitState probe = c.state;
    auto central = [&](const std::function<double&(FitState&)>& ref) {
      double& v = ref(probe);
      const double orig = v;
      v = orig + opt.step;
      const double up = evaluate_loss(probe, c.angles, problem, coef, {}, false, &matching).value;
      v = orig - opt.step;
      const double dn = evaluate_loss(probe, c.angles, problem, coef, {}, false, &matching).value;
      v = orig;
      return (up - dn) / (2.0 * opt.step);
    };

    for (std::size_t p = 0; p < c.state.primitives.size(); ++p) {
      const auto& g = base.gradient.primitives[p];
      Eigen::VectorXd a(3), n(3);
      for (int i = 0; i < 3; ++i) {
        a[i] = g.translation[i];
        n[i] = central([&](FitState& s) -> double& { return s.primitives[p].pose.translation[i]; });
      }
      res.translation = std::max(res.translation, relative_error(a, n));

      a.resize(4);
      n.resize(4);
      for (int i = 0; i < 4; ++i) {
        a[i] = g.rotation[i];
        n[i] = central([&](FitState& s) -> double& {
          auto& q = s.primitives[p].pose.rotation;
          return i == 0 ? q.w : i == 1 ? q.x : i == 2 ? q.y : q.z;
        });
      }
      res.rotation = std::max(res.rotation, relative_error(a, n));

      a.resize(8);
      n.resize(8);
      for (int i = 0; i < 8; ++i) {
        a[i] = g.shape[i];
        n[i] = central([&](FitState& s) -> double& {
          auto& sh = s.primitives[p].shape;
          if (i < 3) return sh.scale[i];
          if (i < 5) return sh.squareness[i - 3];
          if (i < 7) return sh.taper[i - 5];
          return sh.bend;
        });
      }
      res.shape = std::max(res.shape, relative_error(a, n));

      // A seeded subset of velocity-grid coordinates.
      const std::size_t n_coords = g.grid.size() * 3;
      const std::size_t probes = std::min(opt.grid_probes, n_coords);
      a.resize(static_cast<Eigen::Index>(probes));
      n.resize(static_cast<Eigen::Index>(probes));
      for (std::size_t k = 0; k < probes; ++k) {
        const std::size_t coord = rng.index(n_coords);
        const std::size_t node = coord / 3;
        const int axis = static_cast<int>(coord % 3);
        a[static_cast<Eigen::Index>(k)] = g.grid[node][axis];
        n[static_cast<Eigen::Index>(k)] =
            central([&](FitState& s) -> double& { return s.primitives[p].grid.values[node][axis]; });
      }
      res.grid = std::max(res.grid, relative_error(a, n));
    }

    Eigen::VectorXd a(7), n(7);
    for (int i = 0; i < 3; ++i) {
      a[i] = base.gradient.camera_translation[i];
      n[i] = central([&](FitState& s) -> double& { return s.camera->translation[i]; });
    }
    for (int i = 0; i < 4; ++i) {
      a[3 + i] = base.gradient.camera_rotation[i];
      n[3 + i] = central([&](FitState& s) -> double& {
        auto& q = s.camera->rotation;
        return i == 0 ? q.w : i == 1 ? q.x : i == 2 ? q.y : q.z;
      });
    }
    res.camera = std::max(res.camera, relative_error(a, n));
    ++res.configurations;
  }
  return res;
}

/// Gradient check of the dynamic fitting loss with default weights.
inline GradcheckResult run_gradcheck(const GradcheckOptions& opt = {}) {
  return run_gradcheck(opt, LossCoefficients::dynamic_fitting(LossWeights{}));
}

}  // namespace sqfit
