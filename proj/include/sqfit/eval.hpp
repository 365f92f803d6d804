#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "sqfit/dynamics.hpp"
#include "sqfit/errors.hpp"
#include "sqfit/geometry.hpp"
#include "sqfit/local_deform.hpp"
#include "sqfit/model.hpp"
#include "sqfit/nearest.hpp"
#include "sqfit/random.hpp"

namespace sqfit {

struct EvalConfig {
  std::size_t n_points = 100000;
  std::uint64_t seed = 0;
  // Normalized targets fill [-0.5, 0.5]^3; the box is that cube grown by 10%.
  Vec3 lo = Vec3::Constant(-0.55);
  Vec3 hi = Vec3::Constant(0.55);
};

/// Inside-outside test for the union of the deformed primitives. Each query
/// runs the deformation chain backwards: world -> model frame -> inverse
/// local flow -> inverse bend -> inverse taper -> implicit function.
class UnionOccupancy {
 public:
  explicit UnionOccupancy(const FitState& s, int svf_steps = 7) {
    for (const auto& p : s.primitives) {
      Entry e{p.pose.translation, p.pose.rotation.rotation_matrix().transpose(), p.shape, std::nullopt};
      if (!p.grid.is_zero()) e.inverse = inverse_displacement(smooth(p.grid), svf_steps);
      entries_.push_back(std::move(e));
    }
  }

  bool contains_primitive(std::size_t i, const Vec3& x) const {
    const Entry& e = entries_[i];
    Vec3 p = e.rt * (x - e.c);
    if (e.inverse) p += e.inverse->sample(p);
    try {
      p = bend_inverse_point(e.shape, p);
      if (std::abs(p.z()) >= e.shape.scale[2]) return false;
      p = taper_inverse_point(e.shape, p);
    } catch (const BendOutOfRange&) {
      return false;
    } catch (const TaperSingular&) {
      return false;
    }
    return implicit_value(e.shape, p) < 1.0;
  }

  bool operator()(const Vec3& x) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (contains_primitive(i, x)) return true;
    return false;
  }

 private:
  struct Entry {
    Vec3 c;
    Mat3 rt;
    GlobalShapeParams shape;
    std::optional<DisplacementField> inverse;
  };
  std::vector<Entry> entries_;
};

inline bool inside_union(const FitState& s, const Vec3& x) { return UnionOccupancy(s)(x); }

using Occupancy = std::function<bool(const Vec3&)>;

/// Monte-Carlo IoU of two occupancy fields over the evaluation box.
inline double iou(const Occupancy& a, const Occupancy& b, const EvalConfig& cfg) {
  if (cfg.n_points == 0) throw UsageError("IoU needs at least one sample");
  Rng rng(cfg.seed);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < cfg.n_points; ++i) {
    Vec3 x;
    for (int k = 0; k < 3; ++k) x[k] = rng.uniform(cfg.lo[k], cfg.hi[k]);
    const bool ia = a(x);
    const bool ib = b(x);
    inter += (ia && ib) ? 1 : 0;
    uni += (ia || ib) ? 1 : 0;
  }
  if (uni == 0) throw DegenerateUnion("both occupancy fields are empty in the evaluation box");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double iou(const FitState& s, const Occupancy& target, const EvalConfig& cfg) {
  const UnionOccupancy occ(s);
  return iou(Occupancy(std::cref(occ)), target, cfg);
}

/// Chamfer distance with unsquared nearest-neighbour distances.
template <int D>
double chamfer_l1(std::span<const Point<D>> a, std::span<const Point<D>> b) {
  if (a.empty() || b.empty()) throw EmptySet("chamfer of an empty point set");
  const KdTree<D> ta({a.begin(), a.end()});
  const KdTree<D> tb({b.begin(), b.end()});
  double f = 0.0, r = 0.0;
  for (const auto& p : a) f += std::sqrt(tb.nearest(p).squared_distance);
  for (const auto& p : b) r += std::sqrt(ta.nearest(p).squared_distance);
  return f / static_cast<double>(a.size()) + r / static_cast<double>(b.size());
}

inline double chamfer_l1(std::span<const Vec3> a, std::span<const Vec3> b) { return chamfer_l1<3>(a, b); }

struct PrimitiveStats {
  std::size_t samples = 0;         // surface samples drawn from the primitive
  std::size_t target_support = 0;  // target points whose nearest sample lies on it
  Vec3 center = Vec3::Zero();
  GlobalShapeParams shape;
};

struct FitReport {
  std::optional<double> iou;
  double chamfer_l1 = 0.0;
  double chamfer = 0.0;
  std::vector<PrimitiveStats> primitives;
  std::vector<LossRecord> trace;
  std::optional<double> gcc;
  std::optional<double> icc;
};

/// Metrics of a fitted state against normalized target points and, when
/// available, a target occupancy field in the same coordinates.
inline FitReport report(const FitState& s, std::span<const Vec3> target, const std::optional<Occupancy>& target_occ,
                        const EvalConfig& cfg, std::size_t per_primitive = 1000) {
  if (target.empty()) throw EmptyTarget("target has no points");
  FitReport r;
  std::vector<Vec3> all;
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < s.primitives.size(); ++i) {
    const auto smp = sample_primitive(s.primitives[i], per_primitive);
    all.insert(all.end(), smp.world.begin(), smp.world.end());
    owner.insert(owner.end(), smp.world.size(), i);
    PrimitiveStats st;
    st.samples = smp.world.size();
    st.center = s.primitives[i].pose.translation;
    st.shape = s.primitives[i].shape;
    r.primitives.push_back(st);
  }
  if (all.empty()) throw EmptySet("state has no primitives");
  const KdTree<3> tree(all);
  for (const auto& p : target) ++r.primitives[owner[tree.nearest(p).index]].target_support;
  r.chamfer_l1 = chamfer_l1(all, target);
  r.chamfer = chamfer(all, target);
  if (target_occ) r.iou = iou(s, *target_occ, cfg);
  r.trace = s.trace;
  return r;
}

}  // namespace sqfit
