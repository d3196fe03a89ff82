#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace differflow {

// One tap pair of 1-D bilinear resampling with half-pixel centres:
// value = src[lo] * (1 - frac) + src[hi] * frac.
struct BilinearTap {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

inline std::vector<BilinearTap> bilinear_taps(std::size_t src, std::size_t dst) {
  std::vector<BilinearTap> taps(dst);
  const double ratio = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    double pos = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(src - 1));
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, src - 1);
    taps[i] = {lo, hi, pos - static_cast<double>(lo)};
  }
  return taps;
}

// Bilinear sample of a row-major height x width plane at (y, x), with
// coordinates clamped to the plane (edge replication).
inline double sample_clamped(std::span<const double> plane, std::size_t height,
                             std::size_t width, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(width - 1));
  const auto y0 = static_cast<std::size_t>(y);
  const auto x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, height - 1);
  const std::size_t x1 = std::min(x0 + 1, width - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const double top = plane[y0 * width + x0] * (1 - fx) + plane[y0 * width + x1] * fx;
  const double bot = plane[y1 * width + x0] * (1 - fx) + plane[y1 * width + x1] * fx;
  return top * (1 - fy) + bot * fy;
}

// Rotates a plane about its centre by `angle` radians. Output pixel (y, x)
// samples the source at the centre-relative position rotated by -angle.
// Angle zero returns the input unchanged.
inline std::vector<double> rotate_plane(std::span<const double> plane,
                                        std::size_t height, std::size_t width,
                                        double angle) {
  if (angle == 0.0) return {plane.begin(), plane.end()};
  const double c = std::cos(angle), s = std::sin(angle);
  const double cy = (static_cast<double>(height) - 1) / 2;
  const double cx = (static_cast<double>(width) - 1) / 2;
  std::vector<double> out(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    const double dy = static_cast<double>(y) - cy;
    for (std::size_t x = 0; x < width; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double sx = cx + c * dx + s * dy;
      const double sy = cy - s * dx + c * dy;
      out[y * width + x] = sample_clamped(plane, height, width, sy, sx);
    }
  }
  return out;
}

}  // namespace differflow
