#pragma once

// Anomaly scoring (mean NLL over a transform set), the threshold decision,
// and gradient-map localization.

#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "differflow/bilinear.hpp"
#include "differflow/extractor.hpp"
#include "differflow/flow.hpp"
#include "differflow/image.hpp"
#include "differflow/parallel.hpp"
#include "differflow/store.hpp"
#include "differflow/training.hpp"

namespace differflow {

// A trained flow plus everything needed to turn images into its inputs.
// Models trained on precomputed feature files carry no extractor and can
// only score feature records.
template <typename T>
struct AnomalyModel {
  FlowModel<T> flow;
  std::optional<Extractor<T>> extractor;
  MultiScaleConfig scales;
  TransformSampling sampling;

  const Extractor<T>& require_extractor() const {
    if (!extractor) {
      throw Error(
          "model was trained from precomputed features; this operation needs an "
          "image-mode model with a differentiable extractor");
    }
    return *extractor;
  }
};

struct ScoreReport {
  std::string sample_id;
  double score = 0;  // mean of transform_nlls
  int label = -1;    // -1 unknown
  std::vector<double> transform_nlls;
};

inline int classify(double tau, double theta) {
  if (!std::isfinite(tau) || !std::isfinite(theta)) {
    throw NumericalError("classify: non-finite input");
  }
  return tau >= theta ? 1 : 0;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

template <typename T>
ScoreReport anomaly_score(const Image& img, const AnomalyModel<T>& model,
                          const std::vector<TransformSpec>& transforms) {
  if (transforms.empty()) throw Error("anomaly_score: empty transform list");
  const auto& ex = model.require_extractor();
  const FeaturePipeline<T> pipeline(ex, model.scales, img.height, img.width);
  const std::size_t dim = model.flow.dim();
  Tensor<T> batch(Shape{transforms.size(), dim});
  for (std::size_t i = 0; i < transforms.size(); ++i) {
    const Tensor<T> f = pipeline(apply_transform(img, transforms[i]));
    if (f.size() != dim) {
      throw ShapeError("extractor produces " + std::to_string(f.size()) +
                       " features but the flow expects " + std::to_string(dim));
    }
    std::copy(f.values().begin(), f.values().end(), batch.values().begin() + i * dim);
  }
  ScoreReport rep;
  rep.transform_nlls = nll_rows(flow_forward(batch, model.flow));
  rep.score = mean_of(rep.transform_nlls);
  return rep;
}

// Scores feature-file records: per sample, the mean NLL over the records
// with the `count` smallest transform ids. Samples keep first-appearance
// order.
template <typename T>
std::vector<ScoreReport> score_feature_records(const FeatureFile& file,
                                               const FlowModel<T>& flow,
                                               std::size_t count) {
  if (count < 1) throw Error("transform count must be at least 1");
  if (file.dim != flow.dim()) {
    throw ShapeError("feature file has dimension " + std::to_string(file.dim) +
                     " but the model expects " + std::to_string(flow.dim()));
  }
  std::vector<std::string> order;
  std::map<std::string, std::map<std::uint32_t, const FeatureRecord*>> groups;
  for (const auto& rec : file.records) {
    auto [it, fresh] = groups.try_emplace(rec.sample_id);
    if (fresh) order.push_back(rec.sample_id);
    it->second[rec.transform_id] = &rec;
  }
  std::vector<ScoreReport> out;
  for (const auto& id : order) {
    const auto& g = groups[id];
    if (g.size() < count) {
      throw Error("sample '" + id + "' has " + std::to_string(g.size()) +
                  " transformed records, " + std::to_string(count) + " requested");
    }
    Tensor<T> batch(Shape{count, flow.dim()});
    std::size_t row = 0;
    int label = -1;
    for (const auto& [tid, rec] : g) {
      if (row == count) break;
      label = rec->label;
      for (std::size_t j = 0; j < flow.dim(); ++j) {
        batch[row * flow.dim() + j] = static_cast<T>(rec->values[j]);
      }
      ++row;
    }
    ScoreReport rep;
    rep.sample_id = id;
    rep.label = label;
    rep.transform_nlls = nll_rows(flow_forward(batch, flow));
    rep.score = mean_of(rep.transform_nlls);
    out.push_back(std::move(rep));
  }
  return out;
}

struct GradientMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double max_value() const {
    double m = 0;
    for (double v : values) m = std::max(m, v);
    return m;
  }

  std::size_t argmax() const {
    return static_cast<std::size_t>(
        std::max_element(values.begin(), values.end()) - values.begin());
  }
};

// Normalized 1-D Gaussian truncated at radius ceil(2 sigma). sigma == 0
// gives the unit impulse.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0) || !std::isfinite(sigma)) {
    throw Error("blur sigma must be finite and non-negative");
  }
  if (sigma == 0) return {1.0};
  const auto radius = static_cast<std::size_t>(std::ceil(2 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-d * d / (2 * sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable convolution with zero padding.
inline std::vector<double> blur_plane(const std::vector<double>& plane, std::size_t h,
                                      std::size_t w, const std::vector<double>& kernel) {
  const auto r = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  std::vector<double> tmp(plane.size(), 0.0), out(plane.size(), 0.0);
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      double acc = 0;
      for (std::ptrdiff_t k = -r; k <= r; ++k) {
        const std::ptrdiff_t sx = x + k;
        if (sx >= 0 && sx < W) acc += kernel[k + r] * plane[y * W + sx];
      }
      tmp[y * W + x] = acc;
    }
  }
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      double acc = 0;
      for (std::ptrdiff_t k = -r; k <= r; ++k) {
        const std::ptrdiff_t sy = y + k;
        if (sy >= 0 && sy < H) acc += kernel[k + r] * tmp[sy * W + x];
      }
      out[y * W + x] = acc;
    }
  }
  return out;
}

// sum over channels of |G * grad_c| for a [C,H,W] gradient.
template <typename T>
GradientMap gradient_map(const Tensor<T>& grad, double sigma) {
  if (grad.rank() != 3) throw ShapeError("gradient map expects [C,H,W]");
  const std::size_t C = grad.dim(0), h = grad.dim(1), w = grad.dim(2);
  const auto kernel = gaussian_kernel(sigma);
  GradientMap map{h, w, std::vector<double>(h * w, 0.0)};
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> plane(grad.values().begin() + c * h * w,
                              grad.values().begin() + (c + 1) * h * w);
    const auto blurred = blur_plane(plane, h, w, kernel);
    for (std::size_t i = 0; i < h * w; ++i) map.values[i] += std::abs(blurred[i]);
  }
  return map;
}

inline double default_blur_sigma(std::size_t width) {
  return static_cast<double>(width) / 64.0;
}

// `count` evenly spaced angles starting at zero.
inline std::vector<double> default_rotations(std::size_t count) {
  if (count < 1) throw Error("need at least one rotation");
  std::vector<double> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    out[k] = 2 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(count);
  }
  return out;
}

// For each angle: rotate the image, backpropagate the NLL to the pixels,
// blur and channel-sum the gradient, rotate the map back by -angle. The
// result is the mean over angles.
template <typename T>
GradientMap localize(const Image& img, const AnomalyModel<T>& model,
                     const std::vector<double>& rotations, double blur_sigma) {
  if (rotations.empty()) throw Error("localize: empty rotation list");
  const auto& ex = model.require_extractor();
  std::vector<std::vector<double>> maps(rotations.size());
  parallel_for(rotations.size(), [&](std::size_t k) {
    const Image rotated = rotate(img, rotations[k]);
    const auto grad = input_gradient(rotated, ex, model.scales, model.flow);
    const auto m = gradient_map(grad, blur_sigma);
    maps[k] = rotate_plane(m.values, img.height, img.width, -rotations[k]);
  });
  GradientMap out{img.height, img.width, std::vector<double>(img.height * img.width, 0.0)};
  for (const auto& m : maps) {
    for (std::size_t i = 0; i < m.size(); ++i) out.values[i] += m[i];
  }
  for (auto& v : out.values) v /= static_cast<double>(rotations.size());
  return out;
}

}  // namespace differflow
