#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "sqfit/geometry.hpp"

namespace sqfit {

/// Splits `count` samples into an eta x omega grid with n_omega about 1.6 n_eta.
/// n_omega is kept a multiple of 4 so the half-step grid never lands on
/// omega in {0, +-pi/2, pi}. 1000 samples give a 25 x 40 grid.
inline void angle_grid_shape(std::size_t count, std::size_t& n_eta, std::size_t& n_omega) {
  n_eta = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(count / 1.6))));
  n_omega = std::max<std::size_t>(4, (count + n_eta - 1) / n_eta);
  n_omega = (n_omega + 3) / 4 * 4;
}

/// Half-step-offset grid over (eta, omega); never lands on eta = +-pi/2.
inline std::vector<SurfaceAngle> parametric_angle_grid(std::size_t n_eta, std::size_t n_omega) {
  std::vector<SurfaceAngle> out;
  out.reserve(n_eta * n_omega);
  const double pi = std::numbers::pi;
  for (std::size_t i = 0; i < n_eta; ++i) {
    const double eta = -0.5 * pi + (static_cast<double>(i) + 0.5) * pi / static_cast<double>(n_eta);
    for (std::size_t j = 0; j < n_omega; ++j) {
      const double omega = -pi + (static_cast<double>(j) + 0.5) * 2.0 * pi / static_cast<double>(n_omega);
      out.push_back({eta, omega});
    }
  }
  return out;
}

namespace detail {
inline constexpr double kAxisMargin = 1e-9;

// Maps a direction angle phi to the superellipse parameter theta whose point
// lies on the ray at angle phi: |tan theta| = |tan phi|^(1/eps), same quadrant.
inline double equal_direction_angle(double phi, double eps) {
  const double c = std::cos(phi);
  const double s = std::sin(phi);
  const double ac = std::abs(c);
  const double as = std::abs(s);
  // atan2(|s|^(1/eps), |c|^(1/eps)) computed in log space for tiny eps.
  double theta;
  if (as == 0.0) {
    theta = 0.0;
  } else if (ac == 0.0) {
    theta = 0.5 * std::numbers::pi;
  } else {
    const double t = (std::log(as) - std::log(ac)) / eps;
    theta = t > 0.0 ? 0.5 * std::numbers::pi - std::atan(std::exp(-t)) : std::atan(std::exp(t));
  }
  // Keep clear of the axes so the signed powers never hit the log floor.
  theta = std::clamp(theta, kAxisMargin, 0.5 * std::numbers::pi - kAxisMargin);
  const double qc = c < 0.0 ? -1.0 : 1.0;
  const double qs = s < 0.0 ? -1.0 : 1.0;
  return std::atan2(qs * std::sin(theta), qc * std::cos(theta));
}
}  // namespace detail

/// Surface angles for `count` samples of a primitive with squareness `eps`.
/// The half-step grid is laid out over direction angles and mapped through
/// the equal-direction reparameterization, which spreads points far more
/// evenly over box-like shapes than a raw parametric grid.
inline std::vector<SurfaceAngle> surface_angles(const Vec2& eps, std::size_t count) {
  std::size_t n_eta, n_omega;
  angle_grid_shape(count, n_eta, n_omega);
  auto grid = parametric_angle_grid(n_eta, n_omega);
  grid.resize(std::min(grid.size(), count));
  for (auto& a : grid) {
    a.eta = detail::equal_direction_angle(a.eta, eps[0]);
    a.omega = detail::equal_direction_angle(a.omega, eps[1]);
  }
  return grid;
}

}  // namespace sqfit
