#pragma once

#include <Eigen/Core>
#include <ceres/jet.h>

namespace sqfit {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

template <class T>
using Vec3T = Eigen::Matrix<T, 3, 1>;
template <class T>
using Mat3T = Eigen::Matrix<T, 3, 3>;

/// Forward-mode dual number used for second-order loss terms.
template <int N>
using Dual = ceres::Jet<double, N>;

inline double value_of(double v) { return v; }
template <int N>
double value_of(const ceres::Jet<double, N>& v) {
  return v.a;
}

}  // namespace sqfit
