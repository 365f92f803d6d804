#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include "sqfit/dynamics.hpp"
#include "sqfit/errors.hpp"
#include "sqfit/model.hpp"
#include "sqfit/random.hpp"
#include "sqfit/render.hpp"
#include "sqfit/sampling.hpp"

namespace sqfit {

struct StepSizes {
  double pose = 1e-2;
  double shape = 1e-2;
  double grid = 5e-3;
  double camera = 1e-3;

  bool operator==(const StepSizes&) const = default;
};

struct FitConfig {
  int n_prim = 1;
  int iterations = 2000;
  std::uint64_t seed = 0;
  StepSizes step;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  int grid_resolution = 8;
  double grid_sigma = 1.0;
  double focal_length = 2.0;
  int svf_steps = 7;
  std::size_t target_points = 2000;
  std::size_t points_per_primitive = 1000;
  std::size_t eval_points = 100000;
  // Stage schedule as fractions of `iterations`: pose + scale/squareness,
  // then taper/bend, then the velocity grid.
  double stage1_fraction = 0.6;
  double stage2_fraction = 0.2;
  double early_stop_tolerance = 1e-6;
  int early_stop_window = 50;
  // Step sizes are multiplied by this factor at the end of each stage,
  // decaying geometrically in between (1 keeps them constant).
  double stage_decay = 0.1;
  // Before the schedule, each primitive is aligned with the principal axes of
  // its cluster. With a single primitive the six axis assignments are tried
  // for this fraction of the iterations each and the best one is kept.
  bool orientation_search = true;
  double orientation_trial_fraction = 0.05;
  // Also size each primitive to the spread of its cluster along those axes.
  bool moment_init = true;
  // Fade the generalized-force term in linearly over the first stage. Its
  // gradient does not vanish with the residual and, from a rough start,
  // drives poorly placed primitives to shrink instead of move.
  bool gen_ramp = true;
  // With several primitives, every `reseed_interval` iterations of the first
  // stage (until 3/4 of it), collapsed or weakly supported primitives are
  // moved to target regions farther than `reseed_gap` from every sample.
  bool reseed = true;
  int reseed_interval = 100;
  double reseed_gap = 0.05;

  bool operator==(const FitConfig&) const = default;
};

/// Parameter blocks that may move.
struct ActiveBlocks {
  bool pose = true;
  bool scale = true;  // a and eps
  bool taper_bend = false;
  bool grid = false;
  bool camera = false;

  bool operator==(const ActiveBlocks&) const = default;
};

/// Target of a fit, already in normalized coordinates.
struct FitProblem {
  std::vector<Vec3> points;
  std::optional<std::vector<Vec2>> silhouette;
};

// ---------------------------------------------------------------------------
// Flat parameter vector: per primitive c(3) q(4) q_s(8) grid(3 G^3), then
// camera c(3) q(4) when present.
// ---------------------------------------------------------------------------
namespace detail {

inline std::size_t primitive_size(const Primitive& p) { return 15 + 3 * p.grid.values.size(); }

inline Eigen::VectorXd pack(const FitState& s) {
  std::size_t n = s.camera ? 7 : 0;
  for (const auto& p : s.primitives) n += primitive_size(p);
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  Eigen::Index k = 0;
  auto put_q = [&](const UnitQuaternion& q) {
    v[k++] = q.w;
    v[k++] = q.x;
    v[k++] = q.y;
    v[k++] = q.z;
  };
  for (const auto& p : s.primitives) {
    for (int i = 0; i < 3; ++i) v[k++] = p.pose.translation[i];
    put_q(p.pose.rotation);
    for (double x : p.shape.packed()) v[k++] = x;
    for (const auto& g : p.grid.values)
      for (int i = 0; i < 3; ++i) v[k++] = g[i];
  }
  if (s.camera) {
    for (int i = 0; i < 3; ++i) v[k++] = s.camera->translation[i];
    put_q(s.camera->rotation);
  }
  return v;
}

inline void unpack(const Eigen::VectorXd& v, FitState& s) {
  Eigen::Index k = 0;
  auto get_q = [&](UnitQuaternion& q) {
    q.w = v[k++];
    q.x = v[k++];
    q.y = v[k++];
    q.z = v[k++];
  };
  for (auto& p : s.primitives) {
    for (int i = 0; i < 3; ++i) p.pose.translation[i] = v[k++];
    get_q(p.pose.rotation);
    std::array<double, 8> q;
    for (double& x : q) x = v[k++];
    p.shape = GlobalShapeParams::unpack(q);
    for (auto& g : p.grid.values)
      for (int i = 0; i < 3; ++i) g[i] = v[k++];
  }
  if (s.camera) {
    for (int i = 0; i < 3; ++i) s.camera->translation[i] = v[k++];
    get_q(s.camera->rotation);
  }
}

inline Eigen::VectorXd pack_gradient(const FitState& s, const LossGradient& g) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(pack(s).size());
  Eigen::Index k = 0;
  for (std::size_t p = 0; p < s.primitives.size(); ++p) {
    const auto& pg = g.primitives[p];
    v.segment<3>(k) = pg.translation;
    v.segment<4>(k + 3) = pg.rotation;
    v.segment<8>(k + 7) = pg.shape;
    k += 15;
    const auto n = static_cast<Eigen::Index>(s.primitives[p].grid.values.size());
    for (Eigen::Index i = 0; i < n; ++i)
      if (!pg.grid.empty()) v.segment<3>(k + 3 * i) = pg.grid[static_cast<std::size_t>(i)];
    k += 3 * n;
  }
  if (s.camera) {
    v.segment<3>(k) = g.camera_translation;
    v.segment<4>(k + 3) = g.camera_rotation;
  }
  return v;
}

/// Per-entry step size, 0 for frozen entries.
inline Eigen::VectorXd step_sizes(const FitState& s, const StepSizes& lr, const ActiveBlocks& act) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(pack(s).size());
  Eigen::Index k = 0;
  for (const auto& p : s.primitives) {
    if (act.pose) v.segment<7>(k).setConstant(lr.pose);
    if (act.scale) v.segment<5>(k + 7).setConstant(lr.shape);
    if (act.taper_bend) v.segment<3>(k + 12).setConstant(lr.shape);
    k += 15;
    const auto n = static_cast<Eigen::Index>(3 * p.grid.values.size());
    if (act.grid) v.segment(k, n).setConstant(lr.grid);
    k += n;
  }
  if (s.camera && act.camera) v.segment<7>(k).setConstant(lr.camera);
  return v;
}

}  // namespace detail

/// Adam moments for the flat parameter vector. Each entry counts its own
/// updates so blocks enabled late get a proper bias correction.
struct OptimizerState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  Eigen::VectorXi count;
};

/// Box constraints and normalization re-established after every update.
inline void project_constraints(FitState& s) {
  for (auto& p : s.primitives) {
    auto& g = p.shape;
    g.scale = g.scale.cwiseMax(0.01).cwiseMin(2.0);
    g.squareness =
        g.squareness.cwiseMax(GlobalShapeParams::kMinSquareness).cwiseMin(GlobalShapeParams::kMaxSquareness);
    g.taper = g.taper.cwiseMax(-0.99).cwiseMin(0.99);
    const double bmax = 1.0 / g.scale[2];
    g.bend = std::clamp(g.bend, -bmax, bmax);
    p.pose.rotation = p.pose.rotation.normalized();
    const double cap = p.grid.spec.v_cap;
    for (auto& v : p.grid.values) v = v.cwiseMax(-cap).cwiseMin(cap);
  }
  if (s.camera) s.camera->rotation = s.camera->rotation.normalized();
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Uniform scale and offset taking the bounding box of `pts` to a cube of
/// side 1 centered at the origin.
inline Normalization fit_normalization(std::span<const Vec3> pts) {
  if (pts.empty()) throw EmptyTarget("target has no points");
  Vec3 lo = pts.front(), hi = lo;
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  Normalization n;
  n.center = 0.5 * (lo + hi);
  const double extent = (hi - lo).maxCoeff();
  n.scale = extent > 0.0 ? 1.0 / extent : 1.0;
  return n;
}

/// k-means++ seeding followed by a few Lloyd iterations.
inline std::vector<Vec3> cluster_centers(std::span<const Vec3> pts, int k, Rng& rng, int lloyd_iterations = 10) {
  if (pts.empty()) throw EmptyTarget("target has no points");
  const std::size_t n = pts.size();
  std::vector<Vec3> centers;
  centers.push_back(pts[rng.index(n)]);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (pts[i] - centers.back()).squaredNorm());
      total += d2[i];
    }
    std::size_t pick = rng.index(n);
    if (total > 0.0) {
      double r = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        r -= d2[i];
        if (r <= 0.0) {
          pick = i;
          break;
        }
      }
    }
    centers.push_back(pts[pick]);
  }
  for (int it = 0; it < lloyd_iterations; ++it) {
    std::vector<Vec3> sum(centers.size(), Vec3::Zero());
    std::vector<std::size_t> cnt(centers.size(), 0);
    for (const auto& p : pts) {
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < centers.size(); ++c) {
        const double d = (p - centers[c]).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      sum[best] += p;
      ++cnt[best];
    }
    for (std::size_t c = 0; c < centers.size(); ++c)
      if (cnt[c] > 0) centers[c] = sum[c] / static_cast<double>(cnt[c]);
  }
  return centers;
}

inline Primitive initial_primitive(const Vec3& center, const FitConfig& cfg) {
  Primitive p;
  p.pose.translation = center;
  p.shape.scale = Vec3::Constant(0.15);
  GridSpec spec;
  spec.resolution = cfg.grid_resolution;
  spec.sigma = cfg.grid_sigma;
  p.grid = VelocityGrid(spec);
  return p;
}

/// Normalizes the target in place and places n_prim small spheres at
/// cluster seeds. The camera starts at the default viewing pose.
inline FitState initialize(std::vector<Vec3>& target, const FitConfig& cfg) {
  if (target.empty()) throw EmptyTarget("target has no points");
  if (cfg.n_prim < 1) throw UsageError("at least one primitive is required");
  FitState s;
  s.normalization = fit_normalization(target);
  for (auto& p : target) p = s.normalization.apply(p);
  Rng rng(cfg.seed);
  for (const auto& c : cluster_centers(target, cfg.n_prim, rng)) s.primitives.push_back(initial_primitive(c, cfg));
  s.camera = default_camera(2.5, cfg.focal_length);
  return s;
}

/// Rotations whose x, y, z axes follow the principal axes of `pts` in
/// decreasing order of variance, followed by the other five axis
/// assignments (all right-handed).
inline std::vector<UnitQuaternion> principal_frames(std::span<const Vec3> pts) {
  Vec3 mean = Vec3::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : pts) cov += (p - mean) * (p - mean).transpose();
  const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  // Eigenvalues come in increasing order.
  const Vec3 axes[3] = {eig.eigenvectors().col(2), eig.eigenvectors().col(1), eig.eigenvectors().col(0)};
  const int perms[6][3] = {{0, 1, 2}, {1, 0, 2}, {0, 2, 1}, {2, 0, 1}, {1, 2, 0}, {2, 1, 0}};
  std::vector<UnitQuaternion> out;
  for (const auto& pm : perms) {
    Mat3 r;
    r.col(0) = axes[pm[0]];
    r.col(1) = axes[pm[1]];
    r.col(2) = r.col(0).cross(r.col(1));
    const Eigen::Quaterniond q(r);
    out.push_back(UnitQuaternion{q.w(), q.x(), q.y(), q.z()}.normalized());
  }
  return out;
}

/// Rotates the primitive to `frame` and, with moment_init, sets its center to
/// the cluster mean and its scales to sqrt(3) standard deviations along the
/// frame axes (exact for a solid box's surface-free moments, a fair start otherwise).
inline void align_to_cluster(Primitive& p, const UnitQuaternion& frame, std::span<const Vec3> pts,
                             const FitConfig& cfg) {
  p.pose.rotation = frame;
  if (!cfg.moment_init) return;
  Vec3 mean = Vec3::Zero();
  for (const auto& x : pts) mean += x;
  mean /= static_cast<double>(pts.size());
  const Mat3 r = frame.rotation_matrix();
  Vec3 var = Vec3::Zero();
  for (const auto& x : pts) var += (r.transpose() * (x - mean)).cwiseAbs2();
  var /= static_cast<double>(pts.size());
  p.pose.translation = mean;
  p.shape.scale = (3.0 * var).cwiseSqrt().cwiseMax(0.02).cwiseMin(1.0);
}

/// Points of `pts` grouped by their nearest primitive center.
inline std::vector<std::vector<Vec3>> assign_to_primitives(const FitState& s, std::span<const Vec3> pts) {
  std::vector<std::vector<Vec3>> groups(s.primitives.size());
  for (const auto& p : pts) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < s.primitives.size(); ++i) {
      const double d = (p - s.primitives[i].pose.translation).squaredNorm();
      if (d < bd) {
        bd = d;
        best = i;
      }
    }
    groups[best].push_back(p);
  }
  return groups;
}

/// Moves primitives onto uncovered parts of the target. A target point is
/// uncovered when no surface sample lies within `cfg.reseed_gap`; the region
/// around the worst one (uncovered points within 4 gaps) receives a collapsed
/// primitive if there is one, otherwise the primitive that is nearest surface
/// for the fewest target points, provided the region holds more points than
/// it does. The moved primitive is sized to the region. Returns the indices
/// that were moved.
inline std::vector<std::size_t> reallocate_primitives(FitState& s, std::span<const Vec3> target, const FitConfig& cfg) {
  std::vector<Vec3> all;
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < s.primitives.size(); ++i) {
    const auto w = sample_primitive(s.primitives[i], cfg.points_per_primitive, cfg.svf_steps).world;
    all.insert(all.end(), w.begin(), w.end());
    owner.insert(owner.end(), w.size(), i);
  }
  const KdTree<3> tree(all);
  std::vector<std::size_t> support(s.primitives.size(), 0);
  std::vector<double> gap(target.size());
  for (std::size_t j = 0; j < target.size(); ++j) {
    const auto nb = tree.nearest(target[j]);
    ++support[owner[nb.index]];
    gap[j] = std::sqrt(nb.squared_distance);
  }
  std::vector<bool> movable(s.primitives.size(), true);
  std::vector<std::size_t> moved;
  const double radius = 4.0 * cfg.reseed_gap;
  for (;;) {
    const auto far = static_cast<std::size_t>(std::max_element(gap.begin(), gap.end()) - gap.begin());
    if (!(gap[far] > cfg.reseed_gap)) break;
    std::vector<std::size_t> region;
    for (std::size_t j = 0; j < target.size(); ++j)
      if (gap[j] > cfg.reseed_gap && (target[j] - target[far]).norm() < radius) region.push_back(j);
    std::optional<std::size_t> pick;
    // Collapsed: shrunk to a point or a needle (plates are legitimate).
    for (std::size_t i = 0; i < s.primitives.size() && !pick; ++i) {
      const Vec3& a = s.primitives[i].shape.scale;
      if (movable[i] && a.sum() - a.maxCoeff() - a.minCoeff() <= 0.02) pick = i;
    }
    if (!pick) {
      for (std::size_t i = 0; i < s.primitives.size(); ++i)
        if (movable[i] && (!pick || support[i] < support[*pick])) pick = i;
      if (!pick || region.size() <= support[*pick]) break;
    }
    std::vector<Vec3> cluster;
    for (std::size_t j : region) {
      cluster.push_back(target[j]);
      gap[j] = 0.0;
    }
    Primitive fresh = initial_primitive(target[far], cfg);
    fresh.grid = VelocityGrid(s.primitives[*pick].grid.spec);
    if (cluster.size() >= 3) align_to_cluster(fresh, principal_frames(cluster).front(), cluster, cfg);
    s.primitives[*pick] = fresh;
    movable[*pick] = false;
    moved.push_back(*pick);
  }
  return moved;
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// Everything a step needs besides the state itself.
class Fitter {
 public:
  Fitter(const FitProblem& problem, const FitConfig& cfg) : cfg_(cfg), target_(problem.points) {
    if (problem.silhouette) silhouette_.emplace(*problem.silhouette);
    loss_.target = target_.empty() ? nullptr : &target_;
    loss_.silhouette = silhouette_ ? &*silhouette_ : nullptr;
    loss_.weights = cfg.weights;
    loss_.svf_steps = cfg.svf_steps;
    coef_ = LossCoefficients::total(cfg.weights);
  }

  /// Replaces the loss coefficients (the cycle refit uses image terms only).
  void set_coefficients(const LossCoefficients& c) { coef_ = c; }

  /// One optimizer update of the active blocks, then constraint projection.
  /// `lr_scale` multiplies every step size and `gen_scale` the weight of the
  /// generalized-force term in the gradient. The recorded loss always uses
  /// the unscaled weights.
  void step(FitState& s, OptimizerState& opt, const ActiveBlocks& act, double lr_scale = 1.0,
            double gen_scale = 1.0) const {
    std::vector<std::vector<SurfaceAngle>> angles;
    for (const auto& p : s.primitives) angles.push_back(surface_angles(p.shape.squareness, cfg_.points_per_primitive));
    GradientRequest req;
    req.grid = act.grid;
    LossCoefficients coef = coef_;
    coef.gen *= gen_scale;
    const Evaluation ev = evaluate_loss(s, angles, loss_, coef, req);
    check_finite(ev.terms);

    LossRecord rec;
    rec.ext = ev.terms.ext;
    rec.gen = ev.terms.gen;
    rec.sigma = ev.terms.sigma;
    rec.icc = ev.terms.icc;
    rec.total = coef_.ext * rec.ext + coef_.gen * rec.gen + coef_.sigma * rec.sigma + coef_.icc * rec.icc;
    s.trace.push_back(rec);

    Eigen::VectorXd x = detail::pack(s);
    const Eigen::VectorXd g = detail::pack_gradient(s, ev.gradient);
    const Eigen::VectorXd lr = detail::step_sizes(s, cfg_.step, act) * lr_scale;
    if (opt.m.size() != x.size()) {
      opt.m = Eigen::VectorXd::Zero(x.size());
      opt.v = Eigen::VectorXd::Zero(x.size());
      opt.count = Eigen::VectorXi::Zero(x.size());
    }
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (lr[i] == 0.0) continue;
      opt.m[i] = cfg_.beta1 * opt.m[i] + (1.0 - cfg_.beta1) * g[i];
      opt.v[i] = cfg_.beta2 * opt.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const int t = ++opt.count[i];
      const double mh = opt.m[i] / (1.0 - std::pow(cfg_.beta1, t));
      const double vh = opt.v[i] / (1.0 - std::pow(cfg_.beta2, t));
      x[i] -= lr[i] * mh / (std::sqrt(vh) + cfg_.adam_eps);
    }
    detail::unpack(x, s);
    project_constraints(s);
    ++s.iteration;
  }

  /// Runs `iterations` steps through the staged schedule with early stopping
  /// per stage. Camera blocks move only when a silhouette is present and
  /// `optimize_camera` is set.
  void run(FitState& s, int iterations, bool optimize_camera) const {
    const int n1 = static_cast<int>(std::lround(cfg_.stage1_fraction * iterations));
    const int n2 = static_cast<int>(std::lround(cfg_.stage2_fraction * iterations));
    const int lengths[3] = {n1, n2, iterations - n1 - n2};
    OptimizerState opt;
    for (int stage = 0; stage < 3; ++stage) {
      ActiveBlocks act;
      act.taper_bend = stage >= 1;
      act.grid = stage >= 2;
      act.camera = optimize_camera && silhouette_.has_value();
      const int len = lengths[stage];
      const std::size_t start = s.trace.size();
      for (int i = 0; i < len; ++i) {
        const double frac = len > 1 ? static_cast<double>(i) / static_cast<double>(len - 1) : 1.0;
        const double ramp = stage == 0 && cfg_.gen_ramp ? static_cast<double>(i + 1) / len : 1.0;
        step(s, opt, act, std::pow(cfg_.stage_decay, frac), ramp);
        if (stage == 0 && cfg_.reseed && s.primitives.size() > 1 && cfg_.reseed_interval > 0 &&
            (i + 1) % cfg_.reseed_interval == 0 && 4 * (i + 1) <= 3 * len)
          for (std::size_t p : reallocate_primitives(s, target_.points(), cfg_)) reset_moments(s, opt, p);
        // The recorded loss is not the one being descended while the ramp runs.
        if (!(stage == 0 && cfg_.gen_ramp) && stalled(s.trace, start)) break;
      }
    }
  }

  const LossProblem& loss_problem() const { return loss_; }

 private:
  // Clears the optimizer history of primitive `index`.
  static void reset_moments(const FitState& s, OptimizerState& opt, std::size_t index) {
    if (opt.m.size() == 0) return;
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < index; ++i) k += static_cast<Eigen::Index>(detail::primitive_size(s.primitives[i]));
    const auto n = static_cast<Eigen::Index>(detail::primitive_size(s.primitives[index]));
    opt.m.segment(k, n).setZero();
    opt.v.segment(k, n).setZero();
    opt.count.segment(k, n).setZero();
  }

  static void check_finite(const LossTerms& t) {
    const std::pair<const char*, double> terms[] = {
        {"ext", t.ext}, {"gen", t.gen}, {"sigma", t.sigma}, {"icc", t.icc}};
    for (const auto& [name, v] : terms)
      if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite loss term: ") + name);
  }

  // True when the best loss of the last `window` iterations improves on the
  // best loss before them by less than the relative tolerance.
  bool stalled(const std::vector<LossRecord>& trace, std::size_t stage_start) const {
    const auto w = static_cast<std::size_t>(cfg_.early_stop_window);
    if (w == 0 || trace.size() - stage_start <= w) return false;
    const auto split = trace.end() - static_cast<std::ptrdiff_t>(w);
    auto less = [](const LossRecord& a, const LossRecord& b) { return a.total < b.total; };
    const double before = std::min_element(trace.begin() + static_cast<std::ptrdiff_t>(stage_start), split, less)->total;
    const double recent = std::min_element(split, trace.end(), less)->total;
    if (before == 0.0) return true;
    return (before - recent) / std::abs(before) < cfg_.early_stop_tolerance;
  }

  FitConfig cfg_;
  KdTree<3> target_;
  std::optional<KdTree<2>> silhouette_;
  LossProblem loss_;
  LossCoefficients coef_;
};

/// Single update with the full objective, all blocks that the state carries.
inline void step(FitState& s, OptimizerState& opt, const FitProblem& problem, const FitConfig& cfg,
                 const ActiveBlocks& act = {}) {
  Fitter(problem, cfg).step(s, opt, act);
}

/// Initializes from the target (normalizing it in place) and runs the staged
/// schedule, preceded by the orientation search when enabled.
inline FitState fit(std::vector<Vec3>& target, std::optional<std::vector<Vec2>> silhouette, const FitConfig& cfg,
                    std::optional<CameraParams> camera = std::nullopt) {
  FitState s = initialize(target, cfg);
  if (camera) s.camera = camera;
  const FitProblem problem{target, std::move(silhouette)};
  const Fitter fitter(problem, cfg);
  int remaining = cfg.iterations;
  if (cfg.orientation_search && remaining > 0) {
    const auto groups = assign_to_primitives(s, target);
    for (std::size_t i = 0; i < s.primitives.size(); ++i)
      if (groups[i].size() >= 3) align_to_cluster(s.primitives[i], principal_frames(groups[i]).front(), groups[i], cfg);
    const int trial = static_cast<int>(std::lround(cfg.orientation_trial_fraction * cfg.iterations));
    if (s.primitives.size() == 1 && groups[0].size() >= 3 && trial > 0 && 6 * trial < remaining) {
      const auto frames = principal_frames(groups[0]);
      std::optional<FitState> best;
      double best_loss = std::numeric_limits<double>::infinity();
      ActiveBlocks act;
      act.taper_bend = true;
      for (const auto& frame : frames) {
        FitState cand = s;
        align_to_cluster(cand.primitives[0], frame, groups[0], cfg);
        OptimizerState opt;
        for (int i = 0; i < trial; ++i) fitter.step(cand, opt, act);
        double tail = std::numeric_limits<double>::infinity();
        for (std::size_t i = cand.trace.size() - static_cast<std::size_t>(std::min(trial, 10)); i < cand.trace.size(); ++i)
          tail = std::min(tail, cand.trace[i].total);
        if (tail < best_loss) {
          best_loss = tail;
          best = std::move(cand);
        }
      }
      // Continue from the winner; the iteration count includes every trial.
      const int spent = 6 * trial;
      s = std::move(*best);
      s.iteration = spent;
      remaining -= spent;
    }
  }
  fitter.run(s, remaining, true);
  return s;
}

struct CycleResult {
  FitState refit;
  SilhouetteMask mask;
  double gcc = 0.0;
  double icc = 0.0;
};

/// World point on the viewing ray of image point `uv` at camera depth `depth`.
inline Vec3 back_project(const CameraParams& cam, const Vec2& uv, double depth) {
  const Vec3 xs(uv.x() * depth / cam.focal_length, uv.y() * depth / cam.focal_length, depth);
  return cam.rotation.rotation_matrix().transpose() * (xs - cam.translation);
}

/// Renders the fitted state, fits a fresh set of primitives to the silhouette
/// alone (w_f w_sigma L_sigma + w_icc L_icc, camera fixed) for a quarter of
/// the configured iterations, and compares the two shapes in 3D.
///
/// Fresh primitives start as spheres on the viewing rays of the silhouette's
/// cluster centers, at the depth of the normalized frame's origin. Refit
/// primitives are paired with the originals greedily by center distance.
inline CycleResult cycle_refit(const FitState& fitted, const FitConfig& cfg, int width = 128, int height = 128) {
  if (!fitted.camera) throw UsageError("cycle refit needs a camera");
  if (fitted.primitives.empty()) throw UsageError("cycle refit needs at least one primitive");
  const CameraParams cam = *fitted.camera;
  CycleResult out;
  out.mask = render_silhouette(fitted, cam, width, height);
  const auto sil = silhouette_points(out.mask);

  std::vector<Vec3> lifted;
  lifted.reserve(sil.size());
  for (const auto& p : sil) lifted.emplace_back(p.x(), p.y(), 0.0);
  Rng rng(cfg.seed);
  const int k = static_cast<int>(fitted.primitives.size());
  const double depth = cam.translation.z();
  FitState s;
  s.normalization = fitted.normalization;
  s.camera = cam;
  const auto centers = cluster_centers(lifted, k, rng);
  for (const auto& c : centers) s.primitives.push_back(initial_primitive(back_project(cam, c.head<2>(), depth), cfg));
  if (cfg.moment_init) {
    // In-plane axes and extents from the second moments of each cluster's
    // pixels; the unseen depth extent takes the smaller in-plane one.
    std::vector<Eigen::Matrix2d> cov(centers.size(), Eigen::Matrix2d::Zero());
    std::vector<std::size_t> cnt(centers.size(), 0);
    for (const auto& p : lifted) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < centers.size(); ++i)
        if ((p - centers[i]).squaredNorm() < (p - centers[best]).squaredNorm()) best = i;
      const Vec2 d = (p - centers[best]).head<2>();
      cov[best] += d * d.transpose();
      ++cnt[best];
    }
    const Mat3 rc = cam.rotation.rotation_matrix();
    for (std::size_t i = 0; i < centers.size(); ++i) {
      if (cnt[i] < 3) continue;
      const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(cov[i] / static_cast<double>(cnt[i]));
      const double to_world = depth / cam.focal_length;
      const Vec2 e0 = eig.eigenvectors().col(1);
      Mat3 r;
      r.col(0) = rc.transpose() * Vec3(e0.x(), e0.y(), 0.0);
      r.col(1) = rc.transpose() * Vec3(-e0.y(), e0.x(), 0.0);
      r.col(2) = r.col(0).cross(r.col(1));
      const Eigen::Quaterniond q(r);
      auto& prim = s.primitives[i];
      prim.pose.rotation = UnitQuaternion{q.w(), q.x(), q.y(), q.z()}.normalized();
      const double major = std::sqrt(3.0 * std::max(eig.eigenvalues()[1], 0.0)) * to_world;
      const double minor = std::sqrt(3.0 * std::max(eig.eigenvalues()[0], 0.0)) * to_world;
      prim.shape.scale = Vec3(major, minor, minor).cwiseMax(0.02).cwiseMin(1.0);
    }
  }

  const FitProblem problem{{}, sil};
  Fitter fitter(problem, cfg);
  const LossWeights& w = cfg.weights;
  fitter.set_coefficients({0.0, 0.0, w.f * w.sigma, w.icc});
  fitter.run(s, cfg.iterations / 4, false);

  // Greedy pairing, closest pair first.
  std::vector<std::size_t> order(static_cast<std::size_t>(k));
  {
    std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < order.size(); ++i)
      for (std::size_t j = 0; j < order.size(); ++j)
        pairs.emplace_back((fitted.primitives[i].pose.translation - s.primitives[j].pose.translation).squaredNorm(), i, j);
    std::sort(pairs.begin(), pairs.end());
    std::vector<bool> used_i(order.size()), used_j(order.size());
    for (const auto& [d, i, j] : pairs) {
      if (used_i[i] || used_j[j]) continue;
      used_i[i] = used_j[j] = true;
      order[i] = j;
    }
  }
  std::vector<Primitive> paired;
  for (std::size_t i = 0; i < order.size(); ++i) paired.push_back(s.primitives[order[i]]);
  s.primitives = std::move(paired);

  std::vector<std::vector<Vec3>> a, b;
  std::vector<Vec3> all;
  for (std::size_t i = 0; i < order.size(); ++i) {
    a.push_back(sample_primitive(s.primitives[i], cfg.points_per_primitive, cfg.svf_steps).world);
    b.push_back(sample_primitive(fitted.primitives[i], cfg.points_per_primitive, cfg.svf_steps).world);
    all.insert(all.end(), a.back().begin(), a.back().end());
  }
  out.gcc = gcc_loss(a, b, w.gamma_hat);
  out.icc = icc_loss(project(cam, camera_transform(cam, all)), sil, w.gamma_hat);
  out.refit = std::move(s);
  return out;
}

}  // namespace sqfit
