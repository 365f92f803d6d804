#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "sqfit/errors.hpp"
#include "sqfit/scalar.hpp"

namespace sqfit {

/// Layout of a regular velocity/displacement grid over the cube [lo, hi]^3.
struct GridSpec {
  int resolution = 8;
  double lo = -2.0;
  double hi = 2.0;
  double sigma = 1.0;   // Gaussian width in cells; 0 disables smoothing
  double v_cap = 0.25;  // per-component velocity clamp after smoothing

  double spacing() const { return (hi - lo) / (resolution - 1); }
  std::size_t node_count() const {
    const auto g = static_cast<std::size_t>(resolution);
    return g * g * g;
  }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(resolution) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(resolution) * k);
  }
  Vec3 node(int i, int j, int k) const {
    const double h = spacing();
    return {lo + i * h, lo + j * h, lo + k * h};
  }
  bool operator==(const GridSpec&) const = default;
};

/// Node values of a stationary velocity field, x-fastest.
struct VelocityGrid {
  GridSpec spec;
  std::vector<Vec3> values;

  VelocityGrid() : values(spec.node_count(), Vec3::Zero()) {}
  explicit VelocityGrid(const GridSpec& s) : spec(s), values(s.node_count(), Vec3::Zero()) {}

  bool is_zero() const {
    return std::all_of(values.begin(), values.end(), [](const Vec3& v) { return v.isZero(0.0); });
  }
  double max_abs() const {
    double m = 0.0;
    for (const auto& v : values) m = std::max(m, v.cwiseAbs().maxCoeff());
    return m;
  }
};

// Trilinear interpolation stencil with zero padding outside the grid box.
struct Stencil {
  bool inside = false;
  std::array<std::size_t, 8> node{};
  std::array<double, 8> weight{};
  std::array<Vec3, 8> weight_grad{};  // d weight / d position
};

inline Stencil trilinear_stencil(const GridSpec& spec, const Vec3& p) {
  Stencil st;
  for (int a = 0; a < 3; ++a) {
    if (!(p[a] >= spec.lo && p[a] <= spec.hi)) return st;
  }
  st.inside = true;
  const double h = spec.spacing();
  std::array<int, 3> base{};
  std::array<double, 3> frac{};
  for (int a = 0; a < 3; ++a) {
    const double f = (p[a] - spec.lo) / h;
    int i = static_cast<int>(std::floor(f));
    i = std::clamp(i, 0, spec.resolution - 2);
    base[a] = i;
    frac[a] = f - i;
  }
  int c = 0;
  for (int dz = 0; dz < 2; ++dz) {
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx, ++c) {
        const double wx = dx ? frac[0] : 1.0 - frac[0];
        const double wy = dy ? frac[1] : 1.0 - frac[1];
        const double wz = dz ? frac[2] : 1.0 - frac[2];
        const double sx = (dx ? 1.0 : -1.0) / h;
        const double sy = (dy ? 1.0 : -1.0) / h;
        const double sz = (dz ? 1.0 : -1.0) / h;
        st.node[c] = spec.index(base[0] + dx, base[1] + dy, base[2] + dz);
        st.weight[c] = wx * wy * wz;
        st.weight_grad[c] = Vec3(sx * wy * wz, wx * sy * wz, wx * wy * sz);
      }
    }
  }
  return st;
}

inline Vec3 apply_stencil(const Stencil& st, std::span<const Vec3> values) {
  Vec3 out = Vec3::Zero();
  if (!st.inside) return out;
  for (int c = 0; c < 8; ++c) out += st.weight[c] * values[st.node[c]];
  return out;
}

/// Spatial derivative of the interpolated field; column j is d/dp_j.
inline Mat3 stencil_gradient(const Stencil& st, std::span<const Vec3> values) {
  Mat3 g = Mat3::Zero();
  if (!st.inside) return g;
  for (int c = 0; c < 8; ++c) g += values[st.node[c]] * st.weight_grad[c].transpose();
  return g;
}

/// Integrated displacement u_T on the grid nodes; d(p) is its trilinear sample.
struct DisplacementField {
  GridSpec spec;
  std::vector<Vec3> values;

  Vec3 sample(const Vec3& p) const { return apply_stencil(trilinear_stencil(spec, p), values); }
  Mat3 gradient(const Vec3& p) const { return stencil_gradient(trilinear_stencil(spec, p), values); }
  bool is_zero() const {
    return std::all_of(values.begin(), values.end(), [](const Vec3& v) { return v.isZero(0.0); });
  }
};

namespace detail {

// Row-normalized truncated Gaussian as a dense G x G operator.
inline Eigen::MatrixXd smoothing_operator(const GridSpec& spec) {
  const int g = spec.resolution;
  Eigen::MatrixXd k = Eigen::MatrixXd::Identity(g, g);
  if (spec.sigma <= 0.0) return k;
  const int radius = static_cast<int>(std::ceil(2.0 * spec.sigma));
  k.setZero();
  for (int i = 0; i < g; ++i) {
    double sum = 0.0;
    for (int j = std::max(0, i - radius); j <= std::min(g - 1, i + radius); ++j) {
      const double d = i - j;
      k(i, j) = std::exp(-d * d / (2.0 * spec.sigma * spec.sigma));
      sum += k(i, j);
    }
    k.row(i) /= sum;
  }
  return k;
}

// Applies op (or its transpose) along each axis of the grid.
inline std::vector<Vec3> separable_apply(const GridSpec& spec, const Eigen::MatrixXd& op, std::vector<Vec3> v,
                                         bool transpose) {
  const int g = spec.resolution;
  std::vector<Vec3> line(g), out(g);
  for (int axis = 0; axis < 3; ++axis) {
    for (int b = 0; b < g; ++b) {
      for (int a = 0; a < g; ++a) {
        auto at = [&](int t) {
          switch (axis) {
            case 0: return spec.index(t, a, b);
            case 1: return spec.index(a, t, b);
            default: return spec.index(a, b, t);
          }
        };
        for (int t = 0; t < g; ++t) line[t] = v[at(t)];
        for (int i = 0; i < g; ++i) {
          Vec3 acc = Vec3::Zero();
          for (int j = 0; j < g; ++j) {
            const double w = transpose ? op(j, i) : op(i, j);
            if (w != 0.0) acc += w * line[j];
          }
          out[i] = acc;
        }
        for (int t = 0; t < g; ++t) v[at(t)] = out[t];
      }
    }
  }
  return v;
}

inline void check_blowup(const GridSpec& spec, std::span<const Vec3> u) {
  const double half = 0.5 * (spec.hi - spec.lo);
  for (const auto& v : u) {
    if (!(v.cwiseAbs().maxCoeff() <= half)) throw FlowBlowup("displacement exceeds the grid half-width");
  }
}

// One squaring step: u <- u + u(x + u).
inline std::vector<Vec3> compose_step(const GridSpec& spec, const std::vector<Vec3>& u) {
  std::vector<Vec3> next(u.size());
  const int g = spec.resolution;
  for (int k = 0; k < g; ++k)
    for (int j = 0; j < g; ++j)
      for (int i = 0; i < g; ++i) {
        const std::size_t n = spec.index(i, j, k);
        next[n] = u[n] + apply_stencil(trilinear_stencil(spec, spec.node(i, j, k) + u[n]), u);
      }
  return next;
}

}  // namespace detail

/// Gaussian smoothing (boundary-renormalized) followed by the v_cap clamp.
inline VelocityGrid smooth(const VelocityGrid& grid) {
  VelocityGrid out(grid.spec);
  out.values = detail::separable_apply(grid.spec, detail::smoothing_operator(grid.spec), grid.values, false);
  for (auto& v : out.values) v = v.cwiseMax(-grid.spec.v_cap).cwiseMin(grid.spec.v_cap);
  return out;
}

/// Scaling and squaring: u_0 = v / 2^T, then T compositions u <- u + u(x + u).
inline DisplacementField integrate_svf(const VelocityGrid& smoothed, int steps = 7) {
  DisplacementField f{smoothed.spec, smoothed.values};
  const double scale = std::ldexp(1.0, -steps);
  for (auto& v : f.values) v *= scale;
  if (smoothed.is_zero()) return f;
  for (int s = 0; s < steps; ++s) {
    f.values = detail::compose_step(f.spec, f.values);
    detail::check_blowup(f.spec, f.values);
  }
  return f;
}

/// Flow of the negated velocity field.
inline DisplacementField inverse_displacement(const VelocityGrid& smoothed, int steps = 7) {
  VelocityGrid neg = smoothed;
  for (auto& v : neg.values) v = -v;
  return integrate_svf(neg, steps);
}

inline std::vector<Vec3> displacement_at(const DisplacementField& field, std::span<const Vec3> points) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(field.sample(p));
  return out;
}

/// Forward pass of raw velocity -> smoothing -> clamp -> scaling and squaring,
/// keeping every intermediate needed for the exact reverse pass.
class FlowTape {
 public:
  FlowTape(const VelocityGrid& raw, int steps) : spec_(raw.spec), steps_(steps) {
    smoothing_ = detail::smoothing_operator(spec_);
    pre_clamp_ = detail::separable_apply(spec_, smoothing_, raw.values, false);
    std::vector<Vec3> u(pre_clamp_.size());
    const double scale = std::ldexp(1.0, -steps);
    for (std::size_t n = 0; n < u.size(); ++n) u[n] = pre_clamp_[n].cwiseMax(-spec_.v_cap).cwiseMin(spec_.v_cap) * scale;
    history_.push_back(std::move(u));
    zero_ = raw.is_zero();
    // A zero field stays zero under composition; the reverse pass still
    // walks T identical zero states to pick up the 2^T linearization.
    if (zero_) {
      history_.resize(static_cast<std::size_t>(steps) + 1, history_.front());
      return;
    }
    for (int s = 0; s < steps; ++s) {
      history_.push_back(detail::compose_step(spec_, history_.back()));
      detail::check_blowup(spec_, history_.back());
    }
  }

  DisplacementField field() const { return {spec_, history_.back()}; }
  bool zero() const { return zero_; }

  /// Gradient of sum_i cot_i . d(points_i) w.r.t. the raw velocity values.
  std::vector<Vec3> backward(std::span<const Vec3> points, std::span<const Vec3> cotangents) const {
    if (points.size() != cotangents.size()) throw DimensionMismatch("points and cotangents differ in length");
    const std::size_t n_nodes = spec_.node_count();
    std::vector<Vec3> bar(n_nodes, Vec3::Zero());
    for (std::size_t m = 0; m < points.size(); ++m) {
      const Stencil st = trilinear_stencil(spec_, points[m]);
      if (!st.inside) continue;
      for (int c = 0; c < 8; ++c) bar[st.node[c]] += st.weight[c] * cotangents[m];
    }
    const int g = spec_.resolution;
    for (int s = steps_ - 1; s >= 0; --s) {
      const auto& u = history_[s];
      std::vector<Vec3> prev = bar;
      for (int k = 0; k < g; ++k)
        for (int j = 0; j < g; ++j)
          for (int i = 0; i < g; ++i) {
            const std::size_t n = spec_.index(i, j, k);
            if (bar[n].isZero(0.0)) continue;
            const Stencil st = trilinear_stencil(spec_, spec_.node(i, j, k) + u[n]);
            if (!st.inside) continue;
            for (int c = 0; c < 8; ++c) prev[st.node[c]] += st.weight[c] * bar[n];
            prev[n] += stencil_gradient(st, u).transpose() * bar[n];
          }
      bar = std::move(prev);
    }
    const double scale = std::ldexp(1.0, -steps_);
    for (std::size_t n = 0; n < n_nodes; ++n) {
      for (int a = 0; a < 3; ++a) {
        const double v = pre_clamp_[n][a];
        bar[n][a] = (v > -spec_.v_cap && v < spec_.v_cap) ? bar[n][a] * scale : 0.0;
      }
    }
    return detail::separable_apply(spec_, smoothing_, std::move(bar), true);
  }

 private:
  GridSpec spec_;
  int steps_;
  bool zero_ = false;
  Eigen::MatrixXd smoothing_;
  std::vector<Vec3> pre_clamp_;
  std::vector<std::vector<Vec3>> history_;
};

/// Convenience: raw velocity -> displacement field.
inline DisplacementField flow(const VelocityGrid& raw, int steps = 7) { return FlowTape(raw, steps).field(); }

/// Reverse-mode gradient of sum_i cot_i . d(points_i) w.r.t. raw velocity values.
inline std::vector<Vec3> grid_gradient(const VelocityGrid& raw, int steps, std::span<const Vec3> points,
                                       std::span<const Vec3> cotangents) {
  return FlowTape(raw, steps).backward(points, cotangents);
}

/// Smallest det(I + grad u) over all interior cell centres.
inline double min_jacobian_determinant(const DisplacementField& field) {
  const auto& spec = field.spec;
  const double h = spec.spacing();
  double worst = std::numeric_limits<double>::infinity();
  for (int k = 0; k + 1 < spec.resolution; ++k)
    for (int j = 0; j + 1 < spec.resolution; ++j)
      for (int i = 0; i + 1 < spec.resolution; ++i) {
        const Vec3 c = spec.node(i, j, k) + Vec3::Constant(0.5 * h);
        worst = std::min(worst, (Mat3::Identity() + field.gradient(c)).determinant());
      }
  return worst;
}

}  // namespace sqfit
