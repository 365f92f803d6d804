#include <gtest/gtest.h>

#include <cmath>

#include "sqfit/fitter.hpp"
#include "test_util.hpp"

using namespace sqfit;

namespace {

std::vector<Vec3> sphere_points(const Vec3& c, double r, std::size_t n) {
  Primitive p;
  p.shape.scale = Vec3::Constant(r);
  p.pose.translation = c;
  return world_transform(p.pose, global_surface(p.shape, surface_angles(Vec2(1, 1), n)));
}

FitConfig small_config(int iterations) {
  FitConfig cfg;
  cfg.iterations = iterations;
  cfg.points_per_primitive = 200;
  cfg.grid_resolution = 4;
  return cfg;
}

void expect_same_state(const FitState& a, const FitState& b) {
  ASSERT_EQ(a.primitives.size(), b.primitives.size());
  for (std::size_t i = 0; i < a.primitives.size(); ++i) {
    EXPECT_EQ(a.primitives[i].pose, b.primitives[i].pose);
    EXPECT_EQ(a.primitives[i].shape, b.primitives[i].shape);
    EXPECT_EQ(a.primitives[i].grid.values, b.primitives[i].grid.values);
  }
  EXPECT_EQ(a.camera, b.camera);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].total, b.trace[i].total);
}

void expect_constraints(const FitState& s) {
  for (const auto& p : s.primitives) {
    const auto& g = p.shape;
    EXPECT_TRUE((g.scale.array() >= 0.01).all() && (g.scale.array() <= 2.0).all());
    EXPECT_TRUE((g.squareness.array() >= 0.1).all() && (g.squareness.array() <= 2.0).all());
    EXPECT_TRUE((g.taper.array().abs() <= 0.99).all());
    EXPECT_LE(std::abs(g.bend * g.scale[2]), 1.0 + 1e-12);
    EXPECT_NEAR(p.pose.rotation.squared_norm(), 1.0, 1e-12);
    EXPECT_LE(p.grid.max_abs(), p.grid.spec.v_cap);
  }
}

}  // namespace

TEST(Initialize, NormalizesToUnitCube) {
  auto pts = sphere_points(Vec3(3, -2, 1), 4.0, 500);
  const FitState s = initialize(pts, small_config(10));
  Vec3 lo = pts[0], hi = pts[0];
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  EXPECT_NEAR((hi - lo).maxCoeff(), 1.0, 1e-12);
  EXPECT_LT((lo + hi).norm(), 1e-12);
  EXPECT_NEAR(s.normalization.scale, 1.0 / 8.0, 1e-3);
  EXPECT_TRUE(s.camera.has_value());
  EXPECT_EQ(s.camera->translation, Vec3(0, 0, 2.5));
  EXPECT_EQ(s.camera->focal_length, 2.0);
}

TEST(Initialize, SinglePrimitiveAtCentroid) {
  Rng rng(3);
  std::vector<Vec3> pts;
  for (int i = 0; i < 300; ++i) pts.emplace_back(rng.uniform(0, 2), rng.uniform(0, 1), rng.uniform(0, 3) * rng.uniform());
  const FitState s = initialize(pts, small_config(10));
  Vec3 mean = Vec3::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  ASSERT_EQ(s.primitives.size(), 1u);
  const auto& p = s.primitives[0];
  EXPECT_LT((p.pose.translation - mean).norm(), 1e-12);
  EXPECT_EQ(p.shape.scale, Vec3::Constant(0.15));
  EXPECT_EQ(p.shape.squareness, Vec2(1, 1));
  EXPECT_EQ(p.shape.taper, Vec2(0, 0));
  EXPECT_EQ(p.shape.bend, 0.0);
  EXPECT_EQ(p.pose.rotation, UnitQuaternion{});
  EXPECT_TRUE(p.grid.is_zero());
}

TEST(Initialize, OneSeedPerCluster) {
  const Vec3 centers[4] = {Vec3(0, 0, 0), Vec3(5, 0, 0), Vec3(0, 5, 0), Vec3(0, 0, 5)};
  std::vector<Vec3> pts;
  for (const auto& c : centers) {
    const auto s = sphere_points(c, 0.3, 100);
    pts.insert(pts.end(), s.begin(), s.end());
  }
  FitConfig cfg = small_config(10);
  cfg.n_prim = 4;
  const FitState s = initialize(pts, cfg);
  std::vector<int> hits(4, 0);
  for (const auto& p : s.primitives) {
    const Vec3 world = s.normalization.revert(p.pose.translation);
    for (int k = 0; k < 4; ++k)
      if ((world - centers[k]).norm() < 0.5) ++hits[k];
  }
  EXPECT_EQ(hits, (std::vector<int>{1, 1, 1, 1}));
}

TEST(Initialize, DeterministicAndValidated) {
  Rng rng(5);
  std::vector<Vec3> pts;
  for (int i = 0; i < 200; ++i) pts.emplace_back(rng.normal(), rng.normal(), rng.normal());
  FitConfig cfg = small_config(10);
  cfg.n_prim = 3;
  auto a = pts, b = pts;
  expect_same_state(initialize(a, cfg), initialize(b, cfg));
  std::vector<Vec3> empty;
  EXPECT_THROW(initialize(empty, cfg), EmptyTarget);
}

TEST(Step, ZeroGradientLeavesParameters) {
  FitConfig cfg = small_config(10);
  FitState s;
  Primitive p;
  p.shape.scale = Vec3(0.3, 0.2, 0.25);
  p.grid = VelocityGrid(GridSpec{4});
  s.primitives.push_back(p);
  // The target is exactly the primitive's own samples.
  const FitProblem problem{world_transform(p.pose, global_surface(p.shape, surface_angles(p.shape.squareness, 200))),
                           std::nullopt};
  OptimizerState opt;
  FitState next = s;
  step(next, opt, problem, cfg);
  EXPECT_EQ(next.primitives[0].pose, s.primitives[0].pose);
  EXPECT_EQ(next.primitives[0].shape, s.primitives[0].shape);
  EXPECT_EQ(next.iteration, 1);
  ASSERT_EQ(next.trace.size(), 1u);
  EXPECT_EQ(next.trace[0].total, 0.0);
  EXPECT_GT(opt.count.sum(), 0);
}

TEST(Step, SphereFitDecreasesExternalLoss) {
  FitConfig cfg = small_config(10);
  auto target = sphere_points(Vec3(0.1, 0.0, -0.05), 0.3, 400);
  FitState s;
  Primitive p;
  p.shape.scale = Vec3::Constant(0.15);
  s.primitives.push_back(p);
  const FitProblem problem{target, std::nullopt};
  const Fitter fitter(problem, cfg);
  OptimizerState opt;
  for (int i = 0; i < 11; ++i) fitter.step(s, opt, ActiveBlocks{});
  for (std::size_t i = 1; i < s.trace.size(); ++i) EXPECT_LT(s.trace[i].ext, s.trace[i - 1].ext) << "step " << i;
}

TEST(Step, Deterministic) {
  Rng rng(7);
  std::vector<Vec3> pts;
  for (int i = 0; i < 300; ++i) pts.emplace_back(rng.normal(), rng.normal() * 0.5, rng.normal() * 0.3);
  FitConfig cfg = small_config(10);
  cfg.n_prim = 2;
  FitState s = initialize(pts, cfg);
  const FitProblem problem{pts, std::nullopt};
  ActiveBlocks act;
  act.taper_bend = act.grid = true;
  FitState a = s, b = s;
  OptimizerState oa, ob;
  for (int i = 0; i < 5; ++i) {
    step(a, oa, problem, cfg, act);
    step(b, ob, problem, cfg, act);
  }
  expect_same_state(a, b);
}

TEST(Step, NonFiniteLossNamesTerm) {
  FitState s;
  Primitive p;
  p.shape.scale = Vec3::Constant(0.2);
  s.primitives.push_back(p);
  std::vector<Vec3> target = sphere_points(Vec3::Zero(), 0.3, 50);
  target[3] = Vec3(std::numeric_limits<double>::infinity(), 0, 0);
  OptimizerState opt;
  try {
    step(s, opt, FitProblem{target, std::nullopt}, small_config(10));
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_NE(std::string(e.what()).find("ext"), std::string::npos);
  }
}

TEST(Schedule, FrozenBlocksAreBitUnchanged) {
  Rng rng(11);
  std::vector<Vec3> pts;
  for (int i = 0; i < 300; ++i) pts.emplace_back(rng.normal(), rng.normal() * 0.5, rng.normal() * 0.3);
  FitConfig cfg = small_config(40);
  FitState s = initialize(pts, cfg);
  s.primitives[0].shape.taper = Vec2(0.1, -0.1);
  const FitState before = s;
  const Fitter fitter(FitProblem{pts, std::nullopt}, cfg);
  OptimizerState opt;
  for (int i = 0; i < 20; ++i) fitter.step(s, opt, ActiveBlocks{});
  EXPECT_EQ(s.primitives[0].shape.taper, before.primitives[0].shape.taper);
  EXPECT_EQ(s.primitives[0].shape.bend, before.primitives[0].shape.bend);
  EXPECT_EQ(s.primitives[0].grid.values, before.primitives[0].grid.values);
  EXPECT_EQ(s.camera, before.camera);
  EXPECT_NE(s.primitives[0].shape.scale, before.primitives[0].shape.scale);
}

TEST(Schedule, GridUntouchedOutsideLastStage) {
  Rng rng(13);
  std::vector<Vec3> pts;
  for (int i = 0; i < 300; ++i) pts.emplace_back(rng.normal(), rng.normal() * 0.5, rng.normal() * 0.3);
  FitConfig cfg = small_config(40);
  cfg.stage1_fraction = 0.5;
  cfg.stage2_fraction = 0.5;
  FitState s = initialize(pts, cfg);
  Fitter(FitProblem{pts, std::nullopt}, cfg).run(s, cfg.iterations, false);
  EXPECT_TRUE(s.primitives[0].grid.is_zero());
  EXPECT_TRUE(s.primitives[0].shape.bend != 0.0 || !s.primitives[0].shape.taper.isZero(0.0));
  expect_constraints(s);
}

TEST(Schedule, ConstraintsHoldThroughoutFit) {
  Rng rng(17);
  std::vector<Vec3> pts;
  for (int i = 0; i < 300; ++i) pts.emplace_back(rng.normal(), rng.normal() * 0.2, rng.normal() * 0.1);
  FitConfig cfg = small_config(60);
  cfg.n_prim = 2;
  FitState s = initialize(pts, cfg);
  const Fitter fitter(FitProblem{pts, std::nullopt}, cfg);
  OptimizerState opt;
  ActiveBlocks act;
  act.taper_bend = act.grid = true;
  for (int i = 0; i < 60; ++i) {
    fitter.step(s, opt, act, 5.0);
    expect_constraints(s);
  }
}

TEST(Schedule, ConvexToyIsMonotoneOverWindows) {
  // Sphere target, sphere-initialized primitive, first stage only.
  FitConfig cfg = small_config(300);
  cfg.stage1_fraction = 1.0;
  cfg.stage2_fraction = 0.0;
  // Same angle set as the primitive samples, so the optimum has zero loss.
  auto target = sphere_points(Vec3(0.05, -0.03, 0.02), 0.35, cfg.points_per_primitive);
  FitState s;
  Primitive p;
  p.shape.scale = Vec3::Constant(0.2);
  p.grid = VelocityGrid(GridSpec{4});
  s.primitives.push_back(p);
  Fitter(FitProblem{target, std::nullopt}, cfg).run(s, cfg.iterations, false);
  ASSERT_GT(s.trace.size(), 100u);
  // Adam keeps jittering once converged; ignore changes below 1e-5.
  for (std::size_t i = 0; i + 25 < s.trace.size(); ++i)
    EXPECT_LE(s.trace[i + 25].ext, s.trace[i].ext + 1e-5) << "window at " << i;
  EXPECT_LT(s.trace.back().ext, 1e-2 * s.trace.front().ext);
  EXPECT_TRUE(s.primitives[0].grid.is_zero());
}

TEST(Reallocate, MovesCollapsedPrimitiveToUncoveredCluster) {
  const FitConfig cfg = small_config(10);
  auto target = sphere_points(Vec3(-0.3, 0, 0), 0.1, 300);
  const auto far = sphere_points(Vec3(0.3, 0, 0), 0.1, 300);
  target.insert(target.end(), far.begin(), far.end());
  FitState s;
  Primitive a;
  a.pose.translation = Vec3(-0.3, 0, 0);
  a.shape.scale = Vec3::Constant(0.1);
  Primitive dot = a;
  dot.shape.scale = Vec3::Constant(0.01);
  s.primitives = {a, dot};
  const auto moved = reallocate_primitives(s, target, cfg);
  ASSERT_EQ(moved, std::vector<std::size_t>{1});
  EXPECT_EQ(s.primitives[0].shape, a.shape);
  EXPECT_LT((s.primitives[1].pose.translation - Vec3(0.3, 0, 0)).norm(), 0.15);
  EXPECT_GT(s.primitives[1].shape.scale.minCoeff(), 0.02);
  // Nothing left uncovered: a second pass is a no-op.
  EXPECT_TRUE(reallocate_primitives(s, std::vector<Vec3>(target.begin(), target.begin() + 300), cfg).empty());
}

TEST(Reallocate, KeepsCoveringPrimitives) {
  const auto target = sphere_points(Vec3::Zero(), 0.3, 400);
  FitState s;
  Primitive p;
  p.shape.scale = Vec3::Constant(0.3);
  s.primitives = {p, p};
  const FitState before = s;
  EXPECT_TRUE(reallocate_primitives(s, target, small_config(10)).empty());
  expect_same_state(s, before);
}

TEST(Fit, ZeroIterationsReturnsInitialization) {
  auto a = sphere_points(Vec3(1, 2, 3), 0.5, 300);
  auto b = a;
  const FitConfig cfg = small_config(0);
  expect_same_state(fit(a, std::nullopt, cfg), initialize(b, cfg));
}

TEST(Fit, RecoversSphere) {
  auto pts = sphere_points(Vec3(0.3, -0.1, 0.2), 0.8, 1000);
  FitConfig cfg;
  cfg.iterations = 600;
  cfg.grid_resolution = 4;
  const FitState s = fit(pts, std::nullopt, cfg);
  EXPECT_LE(s.iteration, 600);
  // Normalization maps the sphere to radius 0.5 about the origin.
  const auto& p = s.primitives[0];
  EXPECT_LT(p.pose.translation.norm(), 0.02);
  EXPECT_LT((p.shape.scale - Vec3::Constant(0.5)).cwiseAbs().maxCoeff(), 0.01);
  EXPECT_LT((p.shape.squareness - Vec2(1, 1)).cwiseAbs().maxCoeff(), 0.05);
  // Rotated samples of a sphere do not land on the target's sample grid, so
  // the Chamfer floor is the sampling spacing rather than zero.
  EXPECT_LT(chamfer(sample_state(s, 1000), pts), 2e-3);
}

TEST(Cycle, RequiresCamera) {
  FitState s;
  s.primitives.emplace_back();
  EXPECT_THROW(cycle_refit(s, small_config(40)), UsageError);
}

TEST(Cycle, SphereRoundTrip) {
  FitState s;
  Primitive p;
  p.shape.scale = Vec3::Constant(0.3);
  p.grid = VelocityGrid(GridSpec{4});
  s.primitives.push_back(p);
  s.camera = default_camera();
  const FitConfig cfg = small_config(400);
  const CycleResult a = cycle_refit(s, cfg);
  EXPECT_LT(a.gcc, 0.05);
  EXPECT_LT(a.icc, 0.02);
  const CycleResult b = cycle_refit(s, cfg);
  EXPECT_EQ(a.gcc, b.gcc);
  EXPECT_EQ(a.icc, b.icc);
  expect_same_state(a.refit, b.refit);
}
