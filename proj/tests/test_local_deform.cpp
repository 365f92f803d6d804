#include <gtest/gtest.h>

#include <cmath>

#include "sqfit/local_deform.hpp"
#include "test_util.hpp"

using namespace sqfit;

namespace {

VelocityGrid random_grid(Rng& rng, int resolution, double amplitude, double sigma = 1.0) {
  GridSpec spec;
  spec.resolution = resolution;
  spec.sigma = sigma;
  VelocityGrid g(spec);
  for (auto& v : g.values) v = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)) * amplitude;
  return g;
}

double max_node_difference(const DisplacementField& a, const DisplacementField& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, (a.values[i] - b.values[i]).cwiseAbs().maxCoeff());
  return m;
}

}  // namespace

TEST(Smooth, ZeroStaysZero) {
  VelocityGrid g;
  EXPECT_TRUE(smooth(g).is_zero());
}

TEST(Smooth, PreservesConstants) {
  VelocityGrid g;
  for (auto& v : g.values) v = Vec3(0.1, -0.05, 0.2);
  for (const auto& v : smooth(g).values) EXPECT_LT((v - Vec3(0.1, -0.05, 0.2)).norm(), 1e-15);
}

TEST(Smooth, ImpulseMatchesDirectConvolution) {
  GridSpec spec;
  spec.v_cap = 10.0;
  VelocityGrid g(spec);
  const int ci = 2, cj = 4, ck = 3;
  g.values[spec.index(ci, cj, ck)] = Vec3(1.0, 0.0, 0.0);
  const VelocityGrid s = smooth(g);
  // Direct 3D convolution with the boundary-renormalized truncated Gaussian.
  const int n = spec.resolution;
  const int radius = static_cast<int>(std::ceil(2.0 * spec.sigma));
  auto weight = [&](int i, int c) {
    if (std::abs(i - c) > radius) return 0.0;
    double sum = 0.0;
    for (int j = std::max(0, i - radius); j <= std::min(n - 1, i + radius); ++j)
      sum += std::exp(-(i - j) * (i - j) / (2.0 * spec.sigma * spec.sigma));
    return std::exp(-(i - c) * (i - c) / (2.0 * spec.sigma * spec.sigma)) / sum;
  };
  double worst = 0.0;
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const double expect = weight(i, ci) * weight(j, cj) * weight(k, ck);
        worst = std::max(worst, std::abs(s.values[spec.index(i, j, k)].x() - expect));
        EXPECT_EQ(s.values[spec.index(i, j, k)].y(), 0.0);
      }
  EXPECT_LT(worst, 1e-15);
}

TEST(Smooth, ClampsToVelocityCap) {
  VelocityGrid g;
  for (auto& v : g.values) v = Vec3(1.0, -1.0, 0.1);
  for (const auto& v : smooth(g).values) {
    EXPECT_DOUBLE_EQ(v.x(), g.spec.v_cap);
    EXPECT_DOUBLE_EQ(v.y(), -g.spec.v_cap);
  }
}

TEST(Integrate, ZeroFieldIsIdentity) {
  const DisplacementField f = integrate_svf(VelocityGrid{});
  EXPECT_TRUE(f.is_zero());
  EXPECT_TRUE(inverse_displacement(VelocityGrid{}).is_zero());
  EXPECT_EQ(f.sample(Vec3(0.3, 0.1, -0.2)), Vec3::Zero());
}

TEST(Integrate, ConstantFieldIsTranslation) {
  GridSpec spec;
  spec.resolution = 12;
  VelocityGrid g(spec);
  const Vec3 c(0.05, -0.03, 0.02);
  for (auto& v : g.values) v = c;
  const DisplacementField f = integrate_svf(g);
  for (int k = 3; k < 9; ++k)
    for (int j = 3; j < 9; ++j)
      for (int i = 3; i < 9; ++i) EXPECT_LT((f.values[spec.index(i, j, k)] - c).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Integrate, SelfConvergence) {
  // First order in 2^-T. The largest gap sits on boundary nodes whose flow
  // leaves the box: they sample zero and keep u_0 = v / 2^T.
  Rng rng(41);
  for (int c = 0; c < 5; ++c) {
    const VelocityGrid v = smooth(random_grid(rng, 8, 0.2));
    const DisplacementField fine = integrate_svf(v, 12);
    const double d7 = max_node_difference(integrate_svf(v, 7), fine);
    const double d8 = max_node_difference(integrate_svf(v, 8), fine);
    EXPECT_NEAR(d7 / d8, 2.0, 0.15);
    EXPECT_LT(d7, 1.1 * v.max_abs() / 128.0);
  }
}

TEST(Integrate, BlowupIsReported) {
  GridSpec spec;
  spec.v_cap = 100.0;
  VelocityGrid g(spec);
  for (auto& v : g.values) v = Vec3(5.0, 0.0, 0.0);
  EXPECT_THROW(integrate_svf(g), FlowBlowup);
}

TEST(Displacement, NodeAndCellCenter) {
  Rng rng(43);
  const VelocityGrid v = random_grid(rng, 8, 0.1, 0.0);
  const DisplacementField f{v.spec, v.values};
  const auto& spec = v.spec;
  EXPECT_LT((f.sample(spec.node(2, 3, 4)) - f.values[spec.index(2, 3, 4)]).norm(), 1e-15);
  const Vec3 center = spec.node(2, 3, 4) + Vec3::Constant(0.5 * spec.spacing());
  Vec3 mean = Vec3::Zero();
  for (int dk = 0; dk < 2; ++dk)
    for (int dj = 0; dj < 2; ++dj)
      for (int di = 0; di < 2; ++di) mean += f.values[spec.index(2 + di, 3 + dj, 4 + dk)];
  EXPECT_LT((f.sample(center) - mean / 8.0).norm(), 1e-15);
  EXPECT_EQ(f.sample(Vec3(3.0, 0.0, 0.0)), Vec3::Zero());
}

TEST(Inverse, ComposesToIdentity) {
  Rng rng(47);
  for (int c = 0; c < 5; ++c) {
    const VelocityGrid v = smooth(random_grid(rng, 8, 0.1));
    ASSERT_LE(v.max_abs(), 0.1 + 1e-12);
    const DisplacementField fwd = integrate_svf(v);
    const DisplacementField inv = inverse_displacement(v);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const Vec3 x(rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2));
      const Vec3 y = x + inv.sample(x);
      worst = std::max(worst, (y + fwd.sample(y) - x).cwiseAbs().maxCoeff());
    }
    EXPECT_LT(worst, 1e-3);
  }
}

TEST(Inverse, InverseOfInverseIsForward) {
  Rng rng(53);
  const VelocityGrid v = smooth(random_grid(rng, 8, 0.2));
  VelocityGrid neg = v;
  for (auto& x : neg.values) x = -x;
  EXPECT_LT(max_node_difference(inverse_displacement(neg), integrate_svf(v)), 1e-6);
}

TEST(Topology, PositiveJacobianDeterminant) {
  Rng rng(59);
  for (int c = 0; c < 10; ++c) {
    const VelocityGrid v = smooth(random_grid(rng, 8, 0.25));
    EXPECT_GT(min_jacobian_determinant(integrate_svf(v)), 0.0);
  }
}

TEST(GridGradient, ZeroCotangents) {
  Rng rng(61);
  const VelocityGrid v = random_grid(rng, 4, 0.1);
  const std::vector<Vec3> pts = {Vec3(0.1, 0.2, 0.3)};
  const std::vector<Vec3> cot = {Vec3::Zero()};
  for (const auto& g : grid_gradient(v, 7, pts, cot)) EXPECT_EQ(g, Vec3::Zero());
}

TEST(GridGradient, NoSquaringIsTrilinearWeights) {
  GridSpec spec;
  spec.resolution = 4;
  spec.sigma = 0.0;
  Rng rng(67);
  const VelocityGrid v = random_grid(rng, 4, 0.05, 0.0);
  const Vec3 p(0.3, -0.4, 0.9);
  const Vec3 cot(1.0, -2.0, 0.5);
  const auto g = grid_gradient(v, 0, std::vector<Vec3>{p}, std::vector<Vec3>{cot});
  // Independent trilinear weights from the cell coordinates.
  const double h = spec.spacing();
  std::vector<Vec3> expect(spec.node_count(), Vec3::Zero());
  const int i0 = static_cast<int>(std::floor((p.x() - spec.lo) / h));
  const int j0 = static_cast<int>(std::floor((p.y() - spec.lo) / h));
  const int k0 = static_cast<int>(std::floor((p.z() - spec.lo) / h));
  const double fx = (p.x() - spec.lo) / h - i0, fy = (p.y() - spec.lo) / h - j0, fz = (p.z() - spec.lo) / h - k0;
  for (int dk = 0; dk < 2; ++dk)
    for (int dj = 0; dj < 2; ++dj)
      for (int di = 0; di < 2; ++di) {
        const double w = (di ? fx : 1 - fx) * (dj ? fy : 1 - fy) * (dk ? fz : 1 - fz);
        expect[spec.index(i0 + di, j0 + dj, k0 + dk)] = w * cot;
      }
  for (std::size_t n = 0; n < expect.size(); ++n) EXPECT_LT((g[n] - expect[n]).norm(), 1e-14);
}

TEST(GridGradient, MatchesFiniteDifferences) {
  Rng rng(71);
  for (int c = 0; c < 3; ++c) {
    const VelocityGrid v = random_grid(rng, 4, 0.15);
    std::vector<Vec3> pts, cot;
    for (int i = 0; i < 30; ++i) {
      pts.emplace_back(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
      cot.emplace_back(rng.normal(), rng.normal(), rng.normal());
    }
    auto objective = [&](const VelocityGrid& g) {
      const DisplacementField f = flow(g);
      double s = 0.0;
      for (std::size_t i = 0; i < pts.size(); ++i) s += cot[i].dot(f.sample(pts[i]));
      return s;
    };
    const auto analytic = grid_gradient(v, 7, pts, cot);
    Eigen::VectorXd a(3 * v.values.size()), n(3 * v.values.size());
    const double h = 1e-6;
    for (std::size_t node = 0; node < v.values.size(); ++node)
      for (int ax = 0; ax < 3; ++ax) {
        VelocityGrid p = v, m = v;
        p.values[node][ax] += h;
        m.values[node][ax] -= h;
        a[static_cast<Eigen::Index>(3 * node + ax)] = analytic[node][ax];
        n[static_cast<Eigen::Index>(3 * node + ax)] = (objective(p) - objective(m)) / (2 * h);
      }
    EXPECT_LT((a - n).norm() / std::max(a.norm(), n.norm()), 1e-4);
  }
}
