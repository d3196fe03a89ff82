#pragma once

// Image-level training and scoring built from the extractor, the flow and
// the transform family.

#include <cstddef>
#include <optional>
#include <vector>

#include "differflow/detect.hpp"
#include "differflow/extractor.hpp"
#include "differflow/image.hpp"
#include "differflow/parallel.hpp"
#include "differflow/random.hpp"
#include "differflow/training.hpp"

namespace differflow {

struct ImageTrainOptions {
  TrainConfig train;
  MultiScaleConfig scales;
  TransformSampling sampling;
  // Draw a fresh random transform per image and epoch; off trains on the
  // untransformed images only.
  bool train_transforms = true;
};

template <typename T>
struct ImageTrainResult {
  AnomalyModel<T> model;
  std::vector<double> loss_history;
  std::optional<double> holdout_nll;
};

// Features of each image after its transform, as an [N,D] matrix.
template <typename T>
Tensor<T> extract_all(const std::vector<Image>& images,
                      const std::vector<TransformSpec>& transforms,
                      const Extractor<T>& ex, const MultiScaleConfig& scales) {
  if (images.empty()) return Tensor<T>(Shape{0, ex.feature_dim(scales)});
  const std::size_t dim = ex.feature_dim(scales);
  Tensor<T> out(Shape{images.size(), dim});
  std::optional<FeaturePipeline<T>> shared;
  const bool uniform = std::all_of(images.begin(), images.end(), [&](const Image& im) {
    return im.height == images[0].height && im.width == images[0].width;
  });
  if (uniform) shared.emplace(ex, scales, images[0].height, images[0].width);
  parallel_for(images.size(), [&](std::size_t i) {
    const Image img = apply_transform(images[i], transforms[i]);
    const Tensor<T> f =
        shared ? (*shared)(img) : FeaturePipeline<T>(ex, scales, img.height, img.width)(img);
    std::copy(f.values().begin(), f.values().end(), out.values().begin() + i * dim);
  });
  return out;
}

template <typename T>
ImageTrainResult<T> train_on_images(const std::vector<Image>& images,
                                    const Extractor<T>& ex,
                                    const ImageTrainOptions& opt,
                                    const EpochCallback& on_epoch = {}) {
  if (images.empty()) throw Error("empty training set");
  const std::size_t n = images.size();
  auto held = static_cast<std::size_t>(
      std::floor(opt.train.holdout_fraction * static_cast<double>(n)));
  if (held >= n) held = 0;
  std::vector<Image> train_images, holdout_images;
  {
    Rng rng(derive_seed(opt.train.seed, SeedStream::Holdout));
    auto order = random_permutation(n, rng);
    std::sort(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
    for (std::size_t k = 0; k < n; ++k) {
      (k < held ? holdout_images : train_images).push_back(images[order[k]]);
    }
  }
  const std::vector<TransformSpec> identity(train_images.size());
  std::optional<Tensor<T>> fixed;
  if (!opt.train_transforms) fixed = extract_all(train_images, identity, ex, opt.scales);

  Rng transform_rng(derive_seed(opt.train.seed, SeedStream::TrainTransforms));
  EpochSource<T> source = [&](std::size_t) {
    if (fixed) return *fixed;
    std::vector<TransformSpec> ts(train_images.size());
    for (auto& t : ts) t = random_transform(transform_rng, opt.sampling);
    return extract_all(train_images, ts, ex, opt.scales);
  };
  std::optional<Tensor<T>> holdout;
  if (!holdout_images.empty()) {
    holdout = extract_all(holdout_images,
                          std::vector<TransformSpec>(holdout_images.size()), ex, opt.scales);
  }
  auto r = train<T>(source, ex.feature_dim(opt.scales), opt.train, holdout, on_epoch);
  ImageTrainResult<T> out;
  out.model.flow = std::move(r.model);
  out.model.extractor = ex;
  out.model.scales = opt.scales;
  out.model.sampling = opt.sampling;
  out.loss_history = std::move(r.loss_history);
  out.holdout_nll = r.holdout_nll;
  return out;
}

// Scores every image with the same transform list.
template <typename T>
std::vector<double> score_images(const std::vector<Image>& images,
                                 const AnomalyModel<T>& model,
                                 const std::vector<TransformSpec>& transforms) {
  std::vector<double> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    out[i] = anomaly_score(images[i], model, transforms).score;
  });
  return out;
}

}  // namespace differflow
