#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "sqfit/errors.hpp"
#include "sqfit/geometry.hpp"
#include "sqfit/model.hpp"

namespace sqfit {

/// Binary image, row 0 at the top.
struct SilhouetteMask {
  int width = 128;
  int height = 128;
  std::vector<std::uint8_t> pixels;  // 0 background, 1 foreground

  SilhouetteMask() : pixels(static_cast<std::size_t>(width * height), 0) {}
  SilhouetteMask(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
  std::size_t foreground() const { return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), 1)); }

  /// Normalized image coordinates of a pixel center: x right, y up, both in [-1, 1].
  Vec2 pixel_center(int row, int col) const {
    return {(col + 0.5) * 2.0 / width - 1.0, 1.0 - (row + 0.5) * 2.0 / height};
  }

  bool operator==(const SilhouetteMask&) const = default;
};

inline constexpr double kSplatPixels = 1.5;

/// Marks every pixel whose center lies within `radius` (normalized units) of
/// a projected point.
inline void splat(SilhouetteMask& mask, std::span<const Vec2> pts, double radius) {
  const double r2 = radius * radius;
  for (const auto& p : pts) {
    // Column c has center x = (c + 0.5) 2 / W - 1.
    const int c0 = std::max(0, static_cast<int>(std::floor((p.x() - radius + 1.0) * mask.width / 2.0 - 0.5)));
    const int c1 = std::min(mask.width - 1, static_cast<int>(std::ceil((p.x() + radius + 1.0) * mask.width / 2.0 - 0.5)));
    const int r0 = std::max(0, static_cast<int>(std::floor((1.0 - p.y() - radius) * mask.height / 2.0 - 0.5)));
    const int r1 = std::min(mask.height - 1, static_cast<int>(std::ceil((1.0 - p.y() + radius) * mask.height / 2.0 - 0.5)));
    for (int row = r0; row <= r1; ++row)
      for (int col = c0; col <= c1; ++col)
        if ((mask.pixel_center(row, col) - p).squaredNorm() <= r2) mask.at(row, col) = 1;
  }
}

/// Projected surface samples of every primitive.
inline std::vector<Vec2> projected_samples(const FitState& s, const CameraParams& cam, std::size_t per_primitive = 1000,
                                           int svf_steps = 7) {
  const auto world = sample_state(s, per_primitive, svf_steps);
  return project(cam, camera_transform(cam, world));
}

/// Point-splat silhouette with a splat radius given in normalized image units.
inline SilhouetteMask render_silhouette(const FitState& s, const CameraParams& cam, int width, int height,
                                        double radius, std::size_t per_primitive = 1000) {
  if (width < 1 || height < 1) throw UsageError("mask dimensions must be positive");
  SilhouetteMask mask(width, height);
  splat(mask, projected_samples(s, cam, per_primitive), radius);
  return mask;
}

/// Point-splat silhouette with the default 1.5 pixel splat radius.
inline SilhouetteMask render_silhouette(const FitState& s, const CameraParams& cam, int width = 128,
                                        int height = 128) {
  return render_silhouette(s, cam, width, height, kSplatPixels * 2.0 / width);
}

/// Foreground pixel centers in normalized image coordinates, row-major order.
inline std::vector<Vec2> silhouette_points(const SilhouetteMask& mask) {
  std::vector<Vec2> out;
  for (int row = 0; row < mask.height; ++row)
    for (int col = 0; col < mask.width; ++col)
      if (mask.at(row, col)) out.push_back(mask.pixel_center(row, col));
  if (out.empty()) throw EmptySilhouette("mask has no foreground pixels");
  return out;
}

}  // namespace sqfit
