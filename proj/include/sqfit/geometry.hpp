#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "sqfit/errors.hpp"
#include "sqfit/scalar.hpp"

namespace sqfit {

// ---------------------------------------------------------------------------
// Parameter types
// ---------------------------------------------------------------------------

struct UnitQuaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double squared_norm() const { return w * w + x * x + y * y + z * z; }

  UnitQuaternion normalized() const {
    const double n = std::sqrt(squared_norm());
    return {w / n, x / n, y / n, z / n};
  }

  Eigen::Vector4d coeffs() const { return {w, x, y, z}; }
  static UnitQuaternion from_coeffs(const Eigen::Vector4d& q) { return {q[0], q[1], q[2], q[3]}; }

  /// Rotation of `angle` radians about the (not necessarily unit) `axis`.
  static UnitQuaternion from_axis_angle(const Vec3& axis, double angle) {
    const Vec3 u = axis.normalized() * std::sin(0.5 * angle);
    return {std::cos(0.5 * angle), u.x(), u.y(), u.z()};
  }

  Mat3 rotation_matrix() const;
  UnitQuaternion conjugate() const { return {w, -x, -y, -z}; }

  friend bool operator==(const UnitQuaternion&, const UnitQuaternion&) = default;
};

/// Global deformation parameters q_s. Packed order: (a1, a2, a3, eps1, eps2, t1, t2, b).
struct GlobalShapeParams {
  Vec3 scale{1.0, 1.0, 1.0};
  Vec2 squareness{1.0, 1.0};
  Vec2 taper{0.0, 0.0};
  double bend = 0.0;

  static constexpr int kSize = 8;
  static constexpr double kMinSquareness = 0.1;
  static constexpr double kMaxSquareness = 2.0;

  std::array<double, kSize> packed() const {
    return {scale[0], scale[1], scale[2], squareness[0], squareness[1], taper[0], taper[1], bend};
  }
  static GlobalShapeParams unpack(std::span<const double, kSize> q) {
    GlobalShapeParams g;
    g.scale = {q[0], q[1], q[2]};
    g.squareness = {q[3], q[4]};
    g.taper = {q[5], q[6]};
    g.bend = q[7];
    return g;
  }

  bool operator==(const GlobalShapeParams&) const = default;
};

struct PrimitivePose {
  Vec3 translation = Vec3::Zero();
  UnitQuaternion rotation;

  bool operator==(const PrimitivePose&) const = default;
};

struct CameraParams {
  Vec3 translation = Vec3::Zero();
  UnitQuaternion rotation;
  double focal_length = 2.0;

  /// Smallest admissible camera-frame depth.
  double min_depth() const { return 1e-4 * focal_length; }

  bool operator==(const CameraParams&) const = default;
};

/// Surface parameter pair: eta in (-pi/2, pi/2), omega in [-pi, pi).
struct SurfaceAngle {
  double eta = 0.0;
  double omega = 0.0;
};

/// Column layout of the per-point model Jacobian L = [I, B, RJ, R].
namespace block {
inline constexpr int kTranslation = 0;
inline constexpr int kRotation = 3;
inline constexpr int kShape = 7;
inline constexpr int kLocal = 15;
inline constexpr int kCount = 18;
}  // namespace block

using ShapeJacobian = Eigen::Matrix<double, 3, 8>;
using RotationJacobian = Eigen::Matrix<double, 3, 4>;
using ProjectionJacobian = Eigen::Matrix<double, 2, 3>;
using ModelJacobian = Eigen::Matrix<double, 3, block::kCount>;
using ImageJacobian = Eigen::Matrix<double, 2, block::kCount>;

// ---------------------------------------------------------------------------
// Scalar-generic kernels. These are instantiated with double for the public
// API and with dual numbers when second derivatives are needed.
// ---------------------------------------------------------------------------
namespace kernel {

inline constexpr double kLogFloor = 1e-12;

inline double signum(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// Signed power sgn(c)|c|^e and log|c| (floored) for a fixed trig value c.
template <class T>
T signed_power(double c, const T& e, double& log_abs) {
  using std::exp;
  log_abs = std::log(std::max(std::abs(c), kLogFloor));
  return signum(c) * exp(e * log_abs);
}

/// Rotation matrix of the normalized quaternion q / |q|.
template <class T>
Mat3T<T> rotation(const T& w, const T& x, const T& y, const T& z) {
  const T n2 = w * w + x * x + y * y + z * z;
  Mat3T<T> r;
  r(0, 0) = w * w + x * x - y * y - z * z;
  r(0, 1) = T(2.0) * (x * y - w * z);
  r(0, 2) = T(2.0) * (x * z + w * y);
  r(1, 0) = T(2.0) * (x * y + w * z);
  r(1, 1) = w * w - x * x + y * y - z * z;
  r(1, 2) = T(2.0) * (y * z - w * x);
  r(2, 0) = T(2.0) * (x * z - w * y);
  r(2, 1) = T(2.0) * (y * z + w * x);
  r(2, 2) = w * w - x * x - y * y + z * z;
  return r / n2;
}

/// d(R(q) p)/dq for the normalized-quaternion rotation, columns (w, x, y, z).
template <class T>
Eigen::Matrix<T, 3, 4> rotation_jacobian(const T& w, const T& x, const T& y, const T& z, const Vec3T<T>& p) {
  const T n2 = w * w + x * x + y * y + z * z;
  const Vec3T<T> v(x, y, z);
  const T vp = v.dot(p);
  const Vec3T<T> vxp = v.cross(p);
  // S(q) p = (w^2 - |v|^2) p + 2 (v.p) v + 2 w (v x p)
  const Vec3T<T> sp = (w * w - v.dot(v)) * p + T(2.0) * vp * v + T(2.0) * w * vxp;

  Eigen::Matrix<T, 3, 4> ds;
  ds.col(0) = T(2.0) * w * p + T(2.0) * vxp;
  Mat3T<T> px;
  px << T(0.0), -p.z(), p.y(), p.z(), T(0.0), -p.x(), -p.y(), p.x(), T(0.0);
  ds.template rightCols<3>() = T(-2.0) * p * v.transpose() + T(2.0) * (v * p.transpose() + vp * Mat3T<T>::Identity()) -
                               T(2.0) * w * px;
  const Eigen::Matrix<T, 4, 1> q(w, x, y, z);
  return (ds - T(2.0) / n2 * sp * q.transpose()) / n2;
}

// Smooth helpers for the bend map, with series expansions near gamma = 0.
inline constexpr double kSeriesThreshold = 0.05;

template <class T>
T sinc(const T& g) {
  using std::sin;
  if (std::abs(value_of(g)) < kSeriesThreshold) {
    const T g2 = g * g;
    return T(1.0) - g2 / 6.0 + g2 * g2 / 120.0 - g2 * g2 * g2 / 5040.0;
  }
  return sin(g) / g;
}

/// (1 - cos g) / g
template <class T>
T versine_ratio(const T& g) {
  using std::sin;
  if (std::abs(value_of(g)) < kSeriesThreshold) {
    const T g2 = g * g;
    return g * (T(0.5) - g2 / 24.0 + g2 * g2 / 720.0 - g2 * g2 * g2 / 40320.0);
  }
  const T h = sin(g * 0.5);
  return T(2.0) * h * h / g;
}

/// (g sin g - 1 + cos g) / g^2
template <class T>
T bend_rate_x(const T& g) {
  using std::cos;
  using std::sin;
  if (std::abs(value_of(g)) < kSeriesThreshold) {
    const T g2 = g * g;
    return T(0.5) - g2 / 8.0 + g2 * g2 / 144.0 - g2 * g2 * g2 * (7.0 / 40320.0) +
           g2 * g2 * g2 * g2 * (9.0 / 3628800.0);
  }
  return (g * sin(g) - T(1.0) + cos(g)) / (g * g);
}

/// (g cos g - sin g) / g^2
template <class T>
T bend_rate_z(const T& g) {
  using std::cos;
  using std::sin;
  if (std::abs(value_of(g)) < kSeriesThreshold) {
    const T g2 = g * g;
    return g * (T(-1.0 / 3.0) + g2 / 30.0 - g2 * g2 * (6.0 / 5040.0) + g2 * g2 * g2 * (8.0 / 362880.0));
  }
  return (g * cos(g) - sin(g)) / (g * g);
}

template <class T>
Vec3T<T> taper(const T& t1, const T& t2, const T& a3, const Vec3T<T>& p) {
  const T k1 = T(1.0) + t1 * p.z() / a3;
  const T k2 = T(1.0) + t2 * p.z() / a3;
  return {k1 * p.x(), k2 * p.y(), p.z()};
}

/// Circular bend of the z axis in the x-z plane with curvature b, written
/// in a form that stays accurate as b -> 0 (exact identity at b = 0).
template <class T>
Vec3T<T> bend(const T& b, const Vec3T<T>& p) {
  using std::cos;
  using std::sin;
  const T g = b * p.z();
  return {p.x() * cos(g) + p.z() * versine_ratio(g), p.y(), p.z() * sinc(g) - p.x() * sin(g)};
}

template <class T>
struct ShapeEval {
  Vec3T<T> s;                     // point after superquadric, taper and bend
  Eigen::Matrix<T, 3, 8> jacobian;  // ds/dq_s
};

/// Global-deformation surface point s(q_s; eta, omega) and J = ds/dq_s.
template <class T>
ShapeEval<T> global_surface(std::span<const T, 8> q, const SurfaceAngle& angle) {
  using std::cos;
  using std::sin;
  const T& a1 = q[0];
  const T& a2 = q[1];
  const T& a3 = q[2];
  const T& e1 = q[3];
  const T& e2 = q[4];
  const T& t1 = q[5];
  const T& t2 = q[6];
  const T& b = q[7];

  double lce, lse, lco, lso;
  const T ce = signed_power(std::cos(angle.eta), e1, lce);
  const T se = signed_power(std::sin(angle.eta), e1, lse);
  const T co = signed_power(std::cos(angle.omega), e2, lco);
  const T so = signed_power(std::sin(angle.omega), e2, lso);

  const Vec3T<T> e(a1 * ce * co, a2 * ce * so, a3 * se);

  Eigen::Matrix<T, 3, 8> de = Eigen::Matrix<T, 3, 8>::Zero();
  de(0, 0) = ce * co;
  de(1, 1) = ce * so;
  de(2, 2) = se;
  de(0, 3) = e.x() * lce;
  de(1, 3) = e.y() * lce;
  de(2, 3) = e.z() * lse;
  de(0, 4) = e.x() * lco;
  de(1, 4) = e.y() * lso;

  // Taper: x' = (1 + t1 z / a3) x, y' = (1 + t2 z / a3) y.
  const T k1 = T(1.0) + t1 * e.z() / a3;
  const T k2 = T(1.0) + t2 * e.z() / a3;
  const Vec3T<T> tp(k1 * e.x(), k2 * e.y(), e.z());
  Mat3T<T> jt = Mat3T<T>::Zero();
  jt(0, 0) = k1;
  jt(1, 1) = k2;
  jt(2, 2) = T(1.0);
  jt(0, 2) = t1 * e.x() / a3;
  jt(1, 2) = t2 * e.y() / a3;

  Eigen::Matrix<T, 3, 8> dt = jt * de;
  dt(0, 2) -= t1 * e.z() * e.x() / (a3 * a3);
  dt(1, 2) -= t2 * e.z() * e.y() / (a3 * a3);
  dt(0, 5) = e.z() * e.x() / a3;
  dt(1, 6) = e.z() * e.y() / a3;

  // Bend.
  const T x = tp.x();
  const T z = tp.z();
  const T g = b * z;
  const T cg = cos(g);
  const T sg = sin(g);
  const T lever = T(1.0) - b * x;
  ShapeEval<T> out;
  out.s = Vec3T<T>(x * cg + z * versine_ratio(g), tp.y(), z * sinc(g) - x * sg);

  Mat3T<T> jb = Mat3T<T>::Zero();
  jb(0, 0) = cg;
  jb(0, 2) = sg * lever;
  jb(1, 1) = T(1.0);
  jb(2, 0) = -sg;
  jb(2, 2) = cg * lever;

  out.jacobian = jb * dt;
  out.jacobian(0, 7) = z * z * bend_rate_x(g) - x * z * sg;
  out.jacobian(1, 7) = T(0.0);
  out.jacobian(2, 7) = z * z * bend_rate_z(g) - x * z * cg;
  return out;
}

}  // namespace kernel

inline Mat3 UnitQuaternion::rotation_matrix() const { return kernel::rotation(w, x, y, z); }

// ---------------------------------------------------------------------------
// Public double-valued API
// ---------------------------------------------------------------------------

/// Unit-scale superquadric point before taper and bend.
inline Vec3 superquadric_point(const GlobalShapeParams& g, const SurfaceAngle& angle) {
  double l;
  const double ce = kernel::signed_power(std::cos(angle.eta), g.squareness[0], l);
  const double se = kernel::signed_power(std::sin(angle.eta), g.squareness[0], l);
  const double co = kernel::signed_power(std::cos(angle.omega), g.squareness[1], l);
  const double so = kernel::signed_power(std::sin(angle.omega), g.squareness[1], l);
  return {g.scale[0] * ce * co, g.scale[1] * ce * so, g.scale[2] * se};
}

inline std::vector<Vec3> superquadric_surface(const GlobalShapeParams& g, std::span<const SurfaceAngle> angles) {
  std::vector<Vec3> out;
  out.reserve(angles.size());
  for (const auto& a : angles) out.push_back(superquadric_point(g, a));
  return out;
}

/// Inside-outside function: < 1 inside, 1 on the surface, > 1 outside.
inline double implicit_value(const GlobalShapeParams& g, const Vec3& p) {
  const double e1 = g.squareness[0];
  const double e2 = g.squareness[1];
  const double fx = std::pow(std::abs(p.x() / g.scale[0]), 2.0 / e2);
  const double fy = std::pow(std::abs(p.y() / g.scale[1]), 2.0 / e2);
  const double fz = std::pow(std::abs(p.z() / g.scale[2]), 2.0 / e1);
  return std::pow(fx + fy, e2 / e1) + fz;
}

namespace detail {
inline constexpr double kTaperSlack = 0.05;
inline constexpr double kTaperFloor = 1e-9;

inline void taper_factors(const GlobalShapeParams& g, double z, double& k1, double& k2) {
  k1 = 1.0 + g.taper[0] * z / g.scale[2];
  k2 = 1.0 + g.taper[1] * z / g.scale[2];
  if (k1 <= kTaperFloor || k2 <= kTaperFloor) {
    throw TaperSingular("taper scale factor non-positive at z = " + std::to_string(z));
  }
}
}  // namespace detail

inline Vec3 taper_point(const GlobalShapeParams& g, const Vec3& p) {
  double k1, k2;
  detail::taper_factors(g, p.z(), k1, k2);
  return {k1 * p.x(), k2 * p.y(), p.z()};
}

inline Vec3 taper_inverse_point(const GlobalShapeParams& g, const Vec3& p) {
  double k1, k2;
  detail::taper_factors(g, p.z(), k1, k2);
  return {p.x() / k1, p.y() / k2, p.z()};
}

inline std::vector<Vec3> taper(const GlobalShapeParams& g, std::span<const Vec3> pts) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(taper_point(g, p));
  return out;
}

inline std::vector<Vec3> taper_inverse(const GlobalShapeParams& g, std::span<const Vec3> pts) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(taper_inverse_point(g, p));
  return out;
}

inline Vec3 bend_point(const GlobalShapeParams& g, const Vec3& p) {
  const double gamma = g.bend * p.z();
  if (std::abs(gamma) >= 0.5 * M_PI) throw BendOutOfRange("bend angle exceeds pi/2");
  return kernel::bend(g.bend, p);
}

/// Inverse bend. Uses gamma = atan2(b z', 1 - b x') and
/// x = (2 x' - b (x'^2 + z'^2)) / (1 + hypot(b z', 1 - b x')),
/// which is the closed-form inverse rearranged to avoid cancellation for small b.
inline Vec3 bend_inverse_point(const GlobalShapeParams& g, const Vec3& p) {
  const double b = g.bend;
  if (b == 0.0) return p;
  const double lever = 1.0 - b * p.x();
  if (lever <= 0.0) throw BendOutOfRange("point lies beyond the bend centre");
  const double gamma = std::atan2(b * p.z(), lever);
  const double h = std::hypot(b * p.z(), lever);
  const double x = (2.0 * p.x() - b * (p.x() * p.x() + p.z() * p.z())) / (1.0 + h);
  return {x, p.y(), gamma / b};
}

inline std::vector<Vec3> bend(const GlobalShapeParams& g, std::span<const Vec3> pts) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(bend_point(g, p));
  return out;
}

inline std::vector<Vec3> bend_inverse(const GlobalShapeParams& g, std::span<const Vec3> pts) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(bend_inverse_point(g, p));
  return out;
}

inline Vec3 global_surface_point(const GlobalShapeParams& g, const SurfaceAngle& angle) {
  const auto q = g.packed();
  return kernel::global_surface<double>(std::span<const double, 8>(q), angle).s;
}

/// s = bend(taper(superquadric(angles))).
inline std::vector<Vec3> global_surface(const GlobalShapeParams& g, std::span<const SurfaceAngle> angles) {
  std::vector<Vec3> out;
  out.reserve(angles.size());
  for (const auto& a : angles) out.push_back(bend_point(g, taper_point(g, superquadric_point(g, a))));
  return out;
}

inline std::vector<ShapeJacobian> shape_jacobian(const GlobalShapeParams& g, std::span<const SurfaceAngle> angles) {
  const auto q = g.packed();
  std::vector<ShapeJacobian> out;
  out.reserve(angles.size());
  for (const auto& a : angles) out.push_back(kernel::global_surface<double>(std::span<const double, 8>(q), a).jacobian);
  return out;
}

inline Vec3 world_point(const PrimitivePose& pose, const Vec3& p) {
  return pose.translation + pose.rotation.rotation_matrix() * p;
}

/// x = c + R p
inline std::vector<Vec3> world_transform(const PrimitivePose& pose, std::span<const Vec3> pts) {
  const Mat3 r = pose.rotation.rotation_matrix();
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(pose.translation + r * p);
  return out;
}

/// p = R^T (x - c)
inline std::vector<Vec3> world_transform_inverse(const PrimitivePose& pose, std::span<const Vec3> pts) {
  const Mat3 rt = pose.rotation.rotation_matrix().transpose();
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& x : pts) out.push_back(rt * (x - pose.translation));
  return out;
}

/// x_sigma = c_sigma + R_sigma x
inline std::vector<Vec3> camera_transform(const CameraParams& cam, std::span<const Vec3> pts) {
  const Mat3 r = cam.rotation.rotation_matrix();
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& x : pts) out.push_back(cam.translation + r * x);
  return out;
}

inline std::vector<Vec2> project(const CameraParams& cam, std::span<const Vec3> xs) {
  std::vector<std::size_t> bad;
  std::vector<Vec2> out;
  out.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Vec3& p = xs[i];
    if (!(p.z() >= cam.min_depth())) {
      bad.push_back(i);
      continue;
    }
    out.emplace_back(p.x() * cam.focal_length / p.z(), p.y() * cam.focal_length / p.z());
  }
  if (!bad.empty()) throw BehindCamera(std::move(bad));
  return out;
}

/// P = d x_proj / d x_sigma.
inline ProjectionJacobian projection_jacobian(const CameraParams& cam, const Vec3& xs) {
  if (!(xs.z() >= cam.min_depth())) throw BehindCamera({0});
  const double f = cam.focal_length;
  const double iz = 1.0 / xs.z();
  ProjectionJacobian p;
  p << f * iz, 0.0, -xs.x() * f * iz * iz, 0.0, f * iz, -xs.y() * f * iz * iz;
  return p;
}

/// B = d(R p)/d q_theta for the pose's (normalized) quaternion.
inline RotationJacobian rotation_jacobian(const PrimitivePose& pose, const Vec3& p) {
  const auto& q = pose.rotation;
  return kernel::rotation_jacobian<double>(q.w, q.x, q.y, q.z, p);
}

/// L = [I, B, R J, R]: derivative of x = c + R (s(q_s) + d) w.r.t.
/// (c, q_theta, q_s, d) at fixed surface angle, with d an independent variable.
inline ModelJacobian model_jacobian(const PrimitivePose& pose, const GlobalShapeParams& g, const SurfaceAngle& angle,
                                    const Vec3& p) {
  const Mat3 r = pose.rotation.rotation_matrix();
  const auto q = g.packed();
  const auto shape = kernel::global_surface<double>(std::span<const double, 8>(q), angle);
  ModelJacobian l;
  l.block<3, 3>(0, block::kTranslation) = Mat3::Identity();
  l.block<3, 4>(0, block::kRotation) = rotation_jacobian(pose, p);
  l.block<3, 8>(0, block::kShape) = r * shape.jacobian;
  l.block<3, 3>(0, block::kLocal) = r;
  return l;
}

/// L_sigma = P R_sigma L.
inline ImageJacobian modified_model_jacobian(const CameraParams& cam, const PrimitivePose& pose,
                                             const GlobalShapeParams& g, const SurfaceAngle& angle, const Vec3& p,
                                             const Vec3& x_sigma) {
  return projection_jacobian(cam, x_sigma) * cam.rotation.rotation_matrix() * model_jacobian(pose, g, angle, p);
}

}  // namespace sqfit
