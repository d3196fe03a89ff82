#pragma once

// Three-channel float images and the transform family used for training
// augmentation and multi-transform scoring.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "differflow/bilinear.hpp"
#include "differflow/tensor.hpp"

namespace differflow {

// Row-major HWC image with values in [0, 1]. Grayscale sources are
// replicated across the three channels.
struct Image {
  static constexpr std::size_t channels = 3;

  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f)
      : height(h), width(w), data(h * w * channels, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) {
    return data[(y * width + x) * channels + c];
  }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return data[(y * width + x) * channels + c];
  }

  std::vector<double> plane(std::size_t c) const {
    std::vector<double> out(height * width);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = data[i * channels + c];
    return out;
  }

  void set_plane(std::size_t c, const std::vector<double>& p) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      data[i * channels + c] = static_cast<float>(std::clamp(p[i], 0.0, 1.0));
    }
  }

  double mean() const {
    double s = 0;
    for (float v : data) s += v;
    return data.empty() ? 0.0 : s / static_cast<double>(data.size());
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// One member of the transform family: rotation, then brightness/contrast.
struct TransformSpec {
  double angle = 0.0;  // radians
  double brightness = 1.0;
  double contrast = 1.0;

  friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

struct TransformSampling {
  // Sample brightness/contrast factors; off means both stay 1.
  bool factors = true;
  double factor_min = 0.85;
  double factor_max = 1.15;
};

// Rotation about the image centre with bilinear interpolation and edge
// clamping. Angle zero is an exact copy.
inline Image rotate(const Image& img, double angle) {
  if (angle == 0.0) return img;
  Image out(img.height, img.width);
  for (std::size_t c = 0; c < Image::channels; ++c) {
    out.set_plane(c, rotate_plane(img.plane(c), img.height, img.width, angle));
  }
  return out;
}

// v' = clip(((v - m) * contrast + m) * brightness, 0, 1) with m the mean
// over all pixels and channels.
inline Image adjust(const Image& img, double brightness, double contrast) {
  if (!(brightness > 0) || !(contrast > 0)) {
    throw Error("adjust: brightness and contrast must be positive");
  }
  if (brightness == 1.0 && contrast == 1.0) return img;
  const double m = img.mean();
  Image out = img;
  for (auto& v : out.data) {
    const double a = ((static_cast<double>(v) - m) * contrast + m) * brightness;
    v = static_cast<float>(std::clamp(a, 0.0, 1.0));
  }
  return out;
}

inline Image apply_transform(const Image& img, const TransformSpec& t) {
  return adjust(rotate(img, t.angle), t.brightness, t.contrast);
}

inline Image resize(const Image& img, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw Error("resize: dimensions must be positive");
  if (h == img.height && w == img.width) return img;
  const auto ty = bilinear_taps(img.height, h);
  const auto tx = bilinear_taps(img.width, w);
  Image out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < Image::channels; ++c) {
        const double fx = tx[x].frac, fy = ty[y].frac;
        const double top = img.at(ty[y].lo, tx[x].lo, c) * (1 - fx) +
                           img.at(ty[y].lo, tx[x].hi, c) * fx;
        const double bot = img.at(ty[y].hi, tx[x].lo, c) * (1 - fx) +
                           img.at(ty[y].hi, tx[x].hi, c) * fx;
        out.at(y, x, c) =
            static_cast<float>(std::clamp(top * (1 - fy) + bot * fy, 0.0, 1.0));
      }
    }
  }
  return out;
}

// Angle ~ U[0, 2 pi) and, when enabled, brightness/contrast ~
// U[factor_min, factor_max].
inline TransformSpec random_transform(std::mt19937_64& rng, const TransformSampling& cfg) {
  std::uniform_real_distribution<double> angle(0.0, 2 * std::numbers::pi);
  std::uniform_real_distribution<double> factor(cfg.factor_min, cfg.factor_max);
  TransformSpec t;
  t.angle = angle(rng);
  if (t.angle >= 2 * std::numbers::pi) t.angle = 0.0;
  if (cfg.factors) {
    t.brightness = factor(rng);
    t.contrast = factor(rng);
  }
  return t;
}

// count == 1 yields the identity only; otherwise `count` random transforms.
inline std::vector<TransformSpec> sample_transforms(std::uint64_t seed,
                                                    std::size_t count,
                                                    const TransformSampling& cfg = {}) {
  if (count < 1) throw Error("sample_transforms: count must be at least 1");
  if (count == 1) return {TransformSpec{}};
  std::mt19937_64 rng(seed);
  std::vector<TransformSpec> out(count);
  for (auto& t : out) t = random_transform(rng, cfg);
  return out;
}

// [3,H,W] tensor view of an image.
template <typename T>
Tensor<T> to_chw(const Image& img) {
  Tensor<T> out(Shape{Image::channels, img.height, img.width});
  const std::size_t hw = img.height * img.width;
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t c = 0; c < Image::channels; ++c) {
      out[c * hw + i] = static_cast<T>(img.data[i * Image::channels + c]);
    }
  }
  return out;
}

}  // namespace differflow
