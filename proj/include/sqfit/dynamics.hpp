#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sqfit/errors.hpp"
#include "sqfit/geometry.hpp"
#include "sqfit/local_deform.hpp"
#include "sqfit/model.hpp"
#include "sqfit/nearest.hpp"

namespace sqfit {

/// Loss weights. (ext, gen, sigma) combine the dynamic fitting loss,
/// (f, gcc, icc) the overall objective.
struct LossWeights {
  double ext = 0.5;
  double gen = 0.3;
  double sigma = 0.2;
  double f = 0.6;
  double gcc = 0.2;
  double icc = 0.2;
  double gamma = 1.0;      // strength of the external force
  double gamma_hat = 1.0;  // strength of the pseudo external forces

  bool operator==(const LossWeights&) const = default;
};

// ---------------------------------------------------------------------------
// Chamfer distances
// ---------------------------------------------------------------------------

/// One-sided and total bi-directional squared-distance Chamfer terms.
struct ChamferTerms {
  double forward = 0.0;  // mean over A of squared distance to nearest in B
  double reverse = 0.0;  // mean over B of squared distance to nearest in A
  double value() const { return forward + reverse; }
};

/// Nearest-neighbour assignments of a Chamfer evaluation: forward[i] is the
/// match in B of a[i], reverse[j] the match in A of b[j].
struct ChamferMatch {
  std::vector<std::size_t> forward;
  std::vector<std::size_t> reverse;
};

/// Chamfer terms of A against the points of `b_tree`. With `reuse` the
/// assignments in `match` are used instead of searching (the loss is then a
/// smooth function of A); otherwise they are searched and, if `match` is
/// given, stored there.
template <int D>
ChamferTerms chamfer_terms(std::span<const Point<D>> a, const KdTree<D>& b_tree, std::vector<Point<D>>* grad_a = nullptr,
                           ChamferMatch* match = nullptr, bool reuse = false) {
  if (a.empty() || b_tree.empty()) throw EmptySet("chamfer of an empty point set");
  const auto& b = b_tree.points();
  ChamferMatch local;
  ChamferMatch& mt = match ? *match : local;
  if (!reuse) {
    const KdTree<D> a_tree({a.begin(), a.end()});
    mt.forward.resize(a.size());
    mt.reverse.resize(b.size());
    for (std::size_t i = 0; i < a.size(); ++i) mt.forward[i] = b_tree.nearest(a[i]).index;
    for (std::size_t j = 0; j < b.size(); ++j) mt.reverse[j] = a_tree.nearest(b[j]).index;
  } else if (mt.forward.size() != a.size() || mt.reverse.size() != b.size()) {
    throw DimensionMismatch("stored matching does not fit the point sets");
  }
  ChamferTerms t;
  if (grad_a) grad_a->assign(a.size(), Point<D>::Zero());
  const double inv_a = 1.0 / static_cast<double>(a.size());
  const double inv_b = 1.0 / static_cast<double>(b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Point<D>& nb = b[mt.forward[i]];
    t.forward += squared_distance<D>(a[i], nb);
    if (grad_a) (*grad_a)[i] += 2.0 * inv_a * (a[i] - nb);
  }
  for (std::size_t j = 0; j < b.size(); ++j) {
    const std::size_t i = mt.reverse[j];
    t.reverse += squared_distance<D>(a[i], b[j]);
    if (grad_a) (*grad_a)[i] += 2.0 * inv_b * (a[i] - b[j]);
  }
  t.forward *= inv_a;
  t.reverse *= inv_b;
  return t;
}

/// Bi-directional Chamfer distance with squared Euclidean distances.
template <int D>
double chamfer(std::span<const Point<D>> a, std::span<const Point<D>> b) {
  if (a.empty() || b.empty()) throw EmptySet("chamfer of an empty point set");
  const KdTree<D> tb({b.begin(), b.end()});
  return chamfer_terms<D>(a, tb).value();
}

inline double chamfer(std::span<const Vec3> a, std::span<const Vec3> b) { return chamfer<3>(a, b); }

// ---------------------------------------------------------------------------
// Generalized forces
// ---------------------------------------------------------------------------

/// f_q = [f_c, f_theta, f_s, f_d], the force pulled back through L.
struct GeneralizedForce {
  Vec3 c = Vec3::Zero();
  Eigen::Vector4d theta = Eigen::Vector4d::Zero();
  Eigen::Matrix<double, 8, 1> s = Eigen::Matrix<double, 8, 1>::Zero();
  Vec3 d = Vec3::Zero();

  Eigen::Matrix<double, block::kCount, 1> packed() const {
    Eigen::Matrix<double, block::kCount, 1> v;
    v << c, theta, s, d;
    return v;
  }
  static GeneralizedForce unpack(const Eigen::Matrix<double, block::kCount, 1>& v) {
    GeneralizedForce g;
    g.c = v.segment<3>(block::kTranslation);
    g.theta = v.segment<4>(block::kRotation);
    g.s = v.segment<8>(block::kShape);
    g.d = v.segment<3>(block::kLocal);
    return g;
  }
  /// ||f_c|| + ||f_theta|| + ||f_s|| + ||f_d||
  double block_norm_sum() const { return c.norm() + theta.norm() + s.norm() + d.norm(); }
};

/// Sum over the batch of f_i^T L_i.
inline GeneralizedForce generalized_force(std::span<const Vec3> forces, std::span<const ModelJacobian> jacobians) {
  if (forces.size() != jacobians.size()) throw DimensionMismatch("force and Jacobian batches differ in size");
  Eigen::Matrix<double, block::kCount, 1> acc = Eigen::Matrix<double, block::kCount, 1>::Zero();
  for (std::size_t i = 0; i < forces.size(); ++i) acc += jacobians[i].transpose() * forces[i];
  return GeneralizedForce::unpack(acc);
}

/// Sum over primitives of the block norms of each (point-averaged) generalized force.
inline double generalized_loss(std::span<const GeneralizedForce> per_primitive) {
  double s = 0.0;
  for (const auto& g : per_primitive) s += g.block_norm_sum();
  return s;
}

/// L_ext = (gamma / n) sum_p chamfer(M_p, T).
inline double external_loss(std::span<const std::vector<Vec3>> primitives, std::span<const Vec3> target,
                            double gamma = 1.0) {
  if (primitives.empty()) throw EmptySet("no primitives");
  double s = 0.0;
  for (const auto& p : primitives) s += chamfer(p, target);
  return gamma * s / static_cast<double>(primitives.size());
}

/// gamma times the Chamfer distance between the union of all primitive samples
/// and the target. This is the coverage form the fitter optimizes: each target
/// point only needs to be explained by one primitive. Equals external_loss for
/// a single primitive.
inline double union_external_loss(std::span<const std::vector<Vec3>> primitives, std::span<const Vec3> target,
                                  double gamma = 1.0) {
  std::vector<Vec3> all;
  for (const auto& p : primitives) all.insert(all.end(), p.begin(), p.end());
  return gamma * chamfer(all, target);
}

/// 2D Chamfer between projected model points and silhouette points.
inline double icc_loss(std::span<const Vec2> rendered, std::span<const Vec2> silhouette, double gamma_hat = 1.0) {
  return gamma_hat * chamfer<2>(rendered, silhouette);
}

/// (gamma_hat / n) sum_p chamfer(refit_p, original_p), primitives matched by index.
inline double gcc_loss(std::span<const std::vector<Vec3>> refit, std::span<const std::vector<Vec3>> original,
                       double gamma_hat = 1.0) {
  if (refit.size() != original.size()) throw DimensionMismatch("primitive counts differ");
  if (refit.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t p = 0; p < refit.size(); ++p) s += chamfer(refit[p], original[p]);
  return gamma_hat * s / static_cast<double>(refit.size());
}

// ---------------------------------------------------------------------------
// Per-point kinematics, generic over the scalar type
// ---------------------------------------------------------------------------
namespace kernel {

// Local variable layout for one surface point: z = (c, q_theta, q_s, d).
inline constexpr int kPointVars = block::kCount;
inline constexpr int kCameraVars = 7;

template <class T>
struct PointKinematics {
  Mat3T<T> rotation;
  Eigen::Matrix<T, 3, 8> shape_jacobian;
  Vec3T<T> p;  // model frame, s + d
  Vec3T<T> x;  // world frame
  T q[4];
};

template <class T>
PointKinematics<T> point_kinematics(std::span<const T, kPointVars> z, const SurfaceAngle& angle) {
  PointKinematics<T> k;
  for (int i = 0; i < 4; ++i) k.q[i] = z[block::kRotation + i];
  k.rotation = rotation(k.q[0], k.q[1], k.q[2], k.q[3]);
  const auto shape = global_surface<T>(z.template subspan<block::kShape, 8>(), angle);
  k.shape_jacobian = shape.jacobian;
  k.p = shape.s + Vec3T<T>(z[block::kLocal], z[block::kLocal + 1], z[block::kLocal + 2]);
  k.x = Vec3T<T>(z[0], z[1], z[2]) + k.rotation * k.p;
  return k;
}

/// f^T L = [f^T, f^T B, f^T R J, f^T R] for a world-space force f.
template <class T>
Eigen::Matrix<T, kPointVars, 1> generalized_row(const PointKinematics<T>& k, const Vec3T<T>& f) {
  Eigen::Matrix<T, kPointVars, 1> row;
  const Vec3T<T> rtf = k.rotation.transpose() * f;
  row.template segment<3>(block::kTranslation) = f;
  row.template segment<4>(block::kRotation) =
      rotation_jacobian<T>(k.q[0], k.q[1], k.q[2], k.q[3], k.p).transpose() * f;
  row.template segment<8>(block::kShape) = k.shape_jacobian.transpose() * rtf;
  row.template segment<3>(block::kLocal) = rtf;
  return row;
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Full objective with gradient
// ---------------------------------------------------------------------------

/// What the scalar being differentiated is made of: coefficient per term.
struct LossCoefficients {
  double ext = 0.0;
  double gen = 0.0;
  double sigma = 0.0;
  double icc = 0.0;

  /// L_f = w_ext L_ext + w_gen L_gen + w_sigma L_sigma
  static LossCoefficients dynamic_fitting(const LossWeights& w) { return {w.ext, w.gen, w.sigma, 0.0}; }
  /// w_f L_f + w_icc L_icc (the cycle term is evaluated separately)
  static LossCoefficients total(const LossWeights& w) { return {w.f * w.ext, w.f * w.gen, w.f * w.sigma, w.icc}; }
};

/// Inputs shared by every evaluation during a fit.
struct LossProblem {
  const KdTree<3>* target = nullptr;      // absent: no L_ext / L_gen
  const KdTree<2>* silhouette = nullptr;  // absent: no L_sigma / L_icc
  LossWeights weights;
  int svf_steps = 7;
};

/// Which parameter blocks need gradients.
struct GradientRequest {
  bool pose = true;
  bool shape = true;
  bool grid = true;
  bool camera = true;
};

struct PrimitiveGradient {
  Vec3 translation = Vec3::Zero();
  Eigen::Vector4d rotation = Eigen::Vector4d::Zero();
  Eigen::Matrix<double, 8, 1> shape = Eigen::Matrix<double, 8, 1>::Zero();
  std::vector<Vec3> grid;  // empty when not requested
};

struct LossGradient {
  std::vector<PrimitiveGradient> primitives;
  Vec3 camera_translation = Vec3::Zero();
  Eigen::Vector4d camera_rotation = Eigen::Vector4d::Zero();
};

struct LossTerms {
  double ext = 0.0;
  double gen = 0.0;
  double sigma = 0.0;
  double icc = 0.0;
  double gcc = 0.0;

  double dynamic_fitting(const LossWeights& w) const { return w.ext * ext + w.gen * gen + w.sigma * sigma; }
};

/// w_f L_f + w_gcc L_gcc + w_icc L_icc
inline double total_loss(const LossTerms& t, const LossWeights& w) {
  return w.f * t.dynamic_fitting(w) + w.gcc * t.gcc + w.icc * t.icc;
}

struct Evaluation {
  LossTerms terms;
  double value = 0.0;  // sum of coefficients * terms
  LossGradient gradient;
};

namespace detail {

using PointVec = Eigen::Matrix<double, kernel::kPointVars, 1>;

struct PrimitiveWork {
  PrimitiveWork(FlowTape t, const std::vector<SurfaceAngle>* a) : tape(std::move(t)), field(tape.field()), angles(a) {}

  FlowTape tape;
  DisplacementField field;
  const std::vector<SurfaceAngle>* angles = nullptr;
  std::vector<Vec3> s, d, p, x;
  std::vector<Mat3> d_grad;
  std::vector<ShapeJacobian> J;
  std::vector<PointVec> cot;  // dLoss/dz per point
  std::size_t offset = 0;     // into the union point list
};

inline std::array<double, kernel::kPointVars> point_vars(const Primitive& prim, const Vec3& d) {
  std::array<double, kernel::kPointVars> z{};
  const auto q = prim.shape.packed();
  for (int i = 0; i < 3; ++i) z[block::kTranslation + i] = prim.pose.translation[i];
  const auto& r = prim.pose.rotation;
  z[block::kRotation + 0] = r.w;
  z[block::kRotation + 1] = r.x;
  z[block::kRotation + 2] = r.y;
  z[block::kRotation + 3] = r.z;
  for (int i = 0; i < 8; ++i) z[block::kShape + i] = q[i];
  for (int i = 0; i < 3; ++i) z[block::kLocal + i] = d[i];
  return z;
}

inline std::array<double, kernel::kCameraVars> camera_vars(const CameraParams& cam) {
  return {cam.translation[0], cam.translation[1], cam.translation[2], cam.rotation.w,
          cam.rotation.x,     cam.rotation.y,     cam.rotation.z};
}

template <class T>
Eigen::Matrix<T, kernel::kPointVars, 1> gen_row_for(std::span<const T, kernel::kPointVars> z, const SurfaceAngle& a,
                                                    const Vec3& target_point) {
  const auto k = kernel::point_kinematics<T>(z, a);
  const Vec3T<T> f = target_point.cast<T>() - k.x;
  return kernel::generalized_row<T>(k, f);
}

// Image-space generalized force f2^T P R_sigma L for one point.
template <class T>
Eigen::Matrix<T, kernel::kPointVars, 1> image_row_for(std::span<const T, kernel::kPointVars> z,
                                                      std::span<const T, kernel::kCameraVars> cam, double focal,
                                                      const SurfaceAngle& a, const Vec2& sil_point) {
  const auto k = kernel::point_kinematics<T>(z, a);
  const Mat3T<T> rc = kernel::rotation(cam[3], cam[4], cam[5], cam[6]);
  const Vec3T<T> xs = Vec3T<T>(cam[0], cam[1], cam[2]) + rc * k.x;
  const T iz = T(1.0) / xs.z();
  const Eigen::Matrix<T, 2, 1> proj(xs.x() * focal * iz, xs.y() * focal * iz);
  const Eigen::Matrix<T, 2, 1> f2 = sil_point.cast<T>() - proj;
  Eigen::Matrix<T, 2, 3> pj;
  pj << focal * iz, T(0.0), -xs.x() * focal * iz * iz, T(0.0), focal * iz, -xs.y() * focal * iz * iz;
  const Vec3T<T> f3 = rc.transpose() * (pj.transpose() * f2);
  return kernel::generalized_row<T>(k, f3);
}

inline Eigen::Matrix<double, 3, 4> camera_rotation_jacobian(const CameraParams& cam, const Vec3& x) {
  const auto& q = cam.rotation;
  return kernel::rotation_jacobian<double>(q.w, q.x, q.y, q.z, x);
}

}  // namespace detail

/// Nearest-neighbour assignments of one loss evaluation. Reusing them makes
/// the loss a smooth function of the parameters, which is what finite
/// difference checks compare against.
struct Matching {
  ChamferMatch target;
  ChamferMatch silhouette;
  bool frozen = false;
};

/// Evaluates the requested loss terms for `state` and the gradient of
/// sum(coef * term) w.r.t. every parameter block. `angles[p]` are the
/// surface samples of primitive p (held fixed for the evaluation).
inline Evaluation evaluate_loss(const FitState& state, std::span<const std::vector<SurfaceAngle>> angles,
                                const LossProblem& problem, const LossCoefficients& coef,
                                const GradientRequest& request = {}, bool with_gradient = true,
                                Matching* matching = nullptr) {
  Matching local_matching;
  Matching& mt = matching ? *matching : local_matching;
  const bool reuse = matching && matching->frozen;
  const std::size_t n_prim = state.primitives.size();
  if (angles.size() != n_prim) throw DimensionMismatch("one angle set per primitive required");
  const LossWeights& w = problem.weights;

  Evaluation ev;
  std::vector<detail::PrimitiveWork> work;
  work.reserve(n_prim);
  std::vector<Vec3> all_x;
  for (std::size_t pi = 0; pi < n_prim; ++pi) {
    const Primitive& prim = state.primitives[pi];
    detail::PrimitiveWork wk(FlowTape(prim.grid, problem.svf_steps), &angles[pi]);
    const bool local = !wk.tape.zero();
    const auto q = prim.shape.packed();
    const Mat3 r = prim.pose.rotation.rotation_matrix();
    wk.offset = all_x.size();
    for (const auto& a : angles[pi]) {
      const auto sh = kernel::global_surface<double>(std::span<const double, 8>(q), a);
      const Stencil st = trilinear_stencil(wk.field.spec, sh.s);
      const Vec3 d = local ? apply_stencil(st, wk.field.values) : Vec3::Zero();
      wk.s.push_back(sh.s);
      wk.d.push_back(d);
      wk.J.push_back(sh.jacobian);
      wk.d_grad.push_back(local ? stencil_gradient(st, wk.field.values) : Mat3::Zero());
      wk.p.push_back(sh.s + d);
      wk.x.push_back(prim.pose.translation + r * wk.p.back());
      all_x.push_back(wk.x.back());
    }
    if (angles[pi].empty()) throw EmptySet("primitive has no surface samples");
    wk.cot.assign(angles[pi].size(), detail::PointVec::Zero());
    work.push_back(std::move(wk));
  }

  std::vector<Vec3> grad_x(all_x.size(), Vec3::Zero());
  Vec3 cam_t_grad = Vec3::Zero();
  Eigen::Vector4d cam_q_grad = Eigen::Vector4d::Zero();

  // External and generalized forces need the target.
  if (problem.target && (coef.ext != 0.0 || coef.gen != 0.0)) {
    std::vector<Vec3> g;
    const ChamferTerms ct =
        chamfer_terms<3>(all_x, *problem.target, with_gradient ? &g : nullptr, &mt.target, reuse);
    ev.terms.ext = w.gamma * ct.value();
    if (with_gradient && coef.ext != 0.0) {
      for (std::size_t i = 0; i < all_x.size(); ++i) grad_x[i] += coef.ext * w.gamma * g[i];
    }
  }

  if (problem.target && coef.gen != 0.0) {
    using J18 = Dual<kernel::kPointVars>;
    for (std::size_t pi = 0; pi < n_prim; ++pi) {
      auto& wk = work[pi];
      const Primitive& prim = state.primitives[pi];
      const std::size_t m_count = wk.s.size();
      const double inv_m = 1.0 / static_cast<double>(m_count);
      std::vector<Eigen::Matrix<J18, kernel::kPointVars, 1>> rows(m_count);
      detail::PointVec mean = detail::PointVec::Zero();
      for (std::size_t m = 0; m < m_count; ++m) {
        const auto zd = detail::point_vars(prim, wk.d[m]);
        std::array<J18, kernel::kPointVars> z;
        for (int i = 0; i < kernel::kPointVars; ++i) z[i] = J18(zd[i], i);
        const Vec3& tau = problem.target->points()[mt.target.forward[wk.offset + m]];
        rows[m] = detail::gen_row_for<J18>(std::span<const J18, kernel::kPointVars>(z), (*wk.angles)[m], tau);
        for (int o = 0; o < kernel::kPointVars; ++o) mean[o] += rows[m][o].a;
      }
      mean *= inv_m;
      const auto gf = GeneralizedForce::unpack(mean);
      ev.terms.gen += gf.block_norm_sum();
      if (!with_gradient) continue;
      // Unit directions of each block (zero blocks contribute a zero subgradient).
      detail::PointVec dir = detail::PointVec::Zero();
      auto unit = [&](int start, int len) {
        const double n = mean.segment(start, len).norm();
        if (n > 0.0) dir.segment(start, len) = mean.segment(start, len) / n;
      };
      unit(block::kTranslation, 3);
      unit(block::kRotation, 4);
      unit(block::kShape, 8);
      unit(block::kLocal, 3);
      const double scale = coef.gen * inv_m;
      for (std::size_t m = 0; m < m_count; ++m) {
        for (int o = 0; o < kernel::kPointVars; ++o) {
          if (dir[o] != 0.0) wk.cot[m] += (scale * dir[o]) * rows[m][o].v;
        }
      }
    }
  }

  // Image-space terms need the silhouette and a camera.
  if (problem.silhouette && state.camera && (coef.sigma != 0.0 || coef.icc != 0.0)) {
    const CameraParams& cam = *state.camera;
    const auto xs = camera_transform(cam, all_x);
    const auto proj = project(cam, xs);
    std::vector<Vec2> g2;
    const ChamferTerms ct =
        chamfer_terms<2>(proj, *problem.silhouette, with_gradient ? &g2 : nullptr, &mt.silhouette, reuse);
    ev.terms.icc = w.gamma_hat * ct.value();
    const Mat3 rc = cam.rotation.rotation_matrix();
    if (with_gradient && coef.icc != 0.0) {
      for (std::size_t i = 0; i < all_x.size(); ++i) {
        const Vec3 gs = projection_jacobian(cam, xs[i]).transpose() * (coef.icc * w.gamma_hat * g2[i]);
        grad_x[i] += rc.transpose() * gs;
        cam_t_grad += gs;
        cam_q_grad += detail::camera_rotation_jacobian(cam, all_x[i]).transpose() * gs;
      }
    }

    if (coef.sigma != 0.0) {
      constexpr int kVars = kernel::kPointVars + kernel::kCameraVars;
      using J25 = Dual<kVars>;
      const auto cvars = detail::camera_vars(cam);
      const double inv_n = 1.0 / static_cast<double>(n_prim);
      for (std::size_t pi = 0; pi < n_prim; ++pi) {
        auto& wk = work[pi];
        const Primitive& prim = state.primitives[pi];
        const std::size_t m_count = wk.s.size();
        const double inv_m = 1.0 / static_cast<double>(m_count);
        std::vector<Eigen::Matrix<J25, kernel::kPointVars, 1>> rows(m_count);
        detail::PointVec mean = detail::PointVec::Zero();
        std::array<J25, kernel::kCameraVars> cz;
        for (int i = 0; i < kernel::kCameraVars; ++i) cz[i] = J25(cvars[i], kernel::kPointVars + i);
        for (std::size_t m = 0; m < m_count; ++m) {
          const auto zd = detail::point_vars(prim, wk.d[m]);
          std::array<J25, kernel::kPointVars> z;
          for (int i = 0; i < kernel::kPointVars; ++i) z[i] = J25(zd[i], i);
          const Vec2& sp = problem.silhouette->points()[mt.silhouette.forward[wk.offset + m]];
          rows[m] = detail::image_row_for<J25>(std::span<const J25, kernel::kPointVars>(z),
                                               std::span<const J25, kernel::kCameraVars>(cz), cam.focal_length,
                                               (*wk.angles)[m], sp);
          for (int o = 0; o < kernel::kPointVars; ++o) mean[o] += rows[m][o].a;
        }
        mean *= inv_m;
        const double norm = mean.norm();
        ev.terms.sigma += inv_n * norm;
        if (!with_gradient || norm == 0.0) continue;
        const detail::PointVec dir = mean / norm;
        const double scale = coef.sigma * inv_n * inv_m;
        for (std::size_t m = 0; m < m_count; ++m) {
          Eigen::Matrix<double, kVars, 1> acc = Eigen::Matrix<double, kVars, 1>::Zero();
          for (int o = 0; o < kernel::kPointVars; ++o) acc += dir[o] * rows[m][o].v;
          acc *= scale;
          wk.cot[m] += acc.head<kernel::kPointVars>();
          cam_t_grad += acc.segment<3>(kernel::kPointVars);
          cam_q_grad += acc.segment<4>(kernel::kPointVars + 3);
        }
      }
    }
  }

  ev.value = coef.ext * ev.terms.ext + coef.gen * ev.terms.gen + coef.sigma * ev.terms.sigma + coef.icc * ev.terms.icc;
  if (!with_gradient) return ev;

  // Pull world-space gradients back through L = [I, B, RJ, R] and push the
  // local-displacement cotangents into q_s and the velocity grid.
  ev.gradient.primitives.resize(n_prim);
  for (std::size_t pi = 0; pi < n_prim; ++pi) {
    auto& wk = work[pi];
    const Primitive& prim = state.primitives[pi];
    auto& pg = ev.gradient.primitives[pi];
    const Mat3 r = prim.pose.rotation.rotation_matrix();
    std::vector<Vec3> cot_d(wk.s.size());
    for (std::size_t m = 0; m < wk.s.size(); ++m) {
      detail::PointVec cz = wk.cot[m];
      const Vec3& gx = grad_x[wk.offset + m];
      if (!gx.isZero(0.0)) {
        cz.segment<3>(block::kTranslation) += gx;
        cz.segment<4>(block::kRotation) += rotation_jacobian(prim.pose, wk.p[m]).transpose() * gx;
        const Vec3 rtg = r.transpose() * gx;
        cz.segment<8>(block::kShape) += wk.J[m].transpose() * rtg;
        cz.segment<3>(block::kLocal) += rtg;
      }
      pg.translation += cz.segment<3>(block::kTranslation);
      pg.rotation += cz.segment<4>(block::kRotation);
      pg.shape += cz.segment<8>(block::kShape);
      cot_d[m] = cz.segment<3>(block::kLocal);
      // d = u(s(q_s)) also moves with the shape parameters.
      if (!wk.tape.zero()) pg.shape += wk.J[m].transpose() * (wk.d_grad[m].transpose() * cot_d[m]);
    }
    if (request.grid) pg.grid = wk.tape.backward(wk.s, cot_d);
  }
  ev.gradient.camera_translation = cam_t_grad;
  ev.gradient.camera_rotation = cam_q_grad;
  return ev;
}

/// L_f and its gradient for fixed surface samples.
inline Evaluation dynamic_fitting_loss(const FitState& state, std::span<const std::vector<SurfaceAngle>> angles,
                                       const LossProblem& problem, const GradientRequest& request = {}) {
  return evaluate_loss(state, angles, problem, LossCoefficients::dynamic_fitting(problem.weights), request);
}

/// L_sigma alone (no gradient).
inline double image_loss(const FitState& state, std::span<const std::vector<SurfaceAngle>> angles,
                         const LossProblem& problem) {
  if (!state.camera) throw UsageError("image loss needs a camera");
  if (!problem.silhouette || problem.silhouette->empty()) throw EmptySilhouette("no silhouette points");
  return evaluate_loss(state, angles, problem, {0.0, 0.0, 1.0, 0.0}, {}, false).terms.sigma;
}

}  // namespace sqfit
