#pragma once

// Frozen multi-scale convolutional feature extractor.
//
// For every active scale s (largest first) the normalized image is resized
// to s x s, run through the conv/relu/maxpool chain and globally average
// pooled to C values. The per-scale vectors are concatenated into D = S * C
// features. The whole pipeline is a graph, so gradients reach the pixels.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "differflow/autodiff.hpp"
#include "differflow/flow.hpp"
#include "differflow/image.hpp"
#include "differflow/random.hpp"
#include "differflow/tensor.hpp"

namespace differflow {

struct ConvLayer {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t in_channels = 3;
  std::size_t out_channels = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct ReluLayer {
  friend bool operator==(const ReluLayer&, const ReluLayer&) = default;
};

struct MaxPoolLayer {
  std::size_t size = 2;
  std::size_t stride = 2;
  friend bool operator==(const MaxPoolLayer&, const MaxPoolLayer&) = default;
};

using Layer = std::variant<ConvLayer, ReluLayer, MaxPoolLayer>;

// Layer chain, serialized as ';'-separated entries:
//   conv <kh> <kw> <in> <out> <stride> <padding> | relu | maxpool <k> <stride>
struct ConvNetSpec {
  std::vector<Layer> layers;

  // Channel count of the final feature map; validates the chain.
  std::size_t output_channels() const {
    std::size_t ch = Image::channels;
    bool any_conv = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (const auto* c = std::get_if<ConvLayer>(&layers[i])) {
        if (c->in_channels != ch) {
          throw ShapeError("layer " + std::to_string(i) + " expects " +
                           std::to_string(c->in_channels) + " channels, chain has " +
                           std::to_string(ch));
        }
        if (c->kernel_h == 0 || c->kernel_w == 0 || c->out_channels == 0 ||
            c->stride == 0) {
          throw ShapeError("layer " + std::to_string(i) + " has a zero extent");
        }
        ch = c->out_channels;
        any_conv = true;
      } else if (const auto* p = std::get_if<MaxPoolLayer>(&layers[i])) {
        if (p->size == 0 || p->stride == 0) {
          throw ShapeError("layer " + std::to_string(i) + " has a zero extent");
        }
      }
    }
    if (!any_conv) throw ShapeError("layer chain has no convolution");
    return ch;
  }

  std::size_t conv_count() const {
    return static_cast<std::size_t>(std::count_if(
        layers.begin(), layers.end(),
        [](const Layer& l) { return std::holds_alternative<ConvLayer>(l); }));
  }

  std::string to_string() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (i) os << ';';
      if (const auto* c = std::get_if<ConvLayer>(&layers[i])) {
        os << "conv " << c->kernel_h << ' ' << c->kernel_w << ' ' << c->in_channels
           << ' ' << c->out_channels << ' ' << c->stride << ' ' << c->padding;
      } else if (const auto* p = std::get_if<MaxPoolLayer>(&layers[i])) {
        os << "maxpool " << p->size << ' ' << p->stride;
      } else {
        os << "relu";
      }
    }
    return os.str();
  }

  static ConvNetSpec parse(std::string_view text) {
    ConvNetSpec spec;
    std::istringstream all{std::string(text)};
    std::string entry;
    while (std::getline(all, entry, ';')) {
      std::istringstream is(entry);
      std::string kind;
      is >> kind;
      if (kind == "conv") {
        ConvLayer c;
        if (!(is >> c.kernel_h >> c.kernel_w >> c.in_channels >> c.out_channels >>
              c.stride >> c.padding)) {
          throw FormatError("malformed conv layer '" + entry + "'");
        }
        spec.layers.emplace_back(c);
      } else if (kind == "relu") {
        spec.layers.emplace_back(ReluLayer{});
      } else if (kind == "maxpool") {
        MaxPoolLayer p;
        if (!(is >> p.size >> p.stride)) {
          throw FormatError("malformed maxpool layer '" + entry + "'");
        }
        spec.layers.emplace_back(p);
      } else {
        throw FormatError("unknown layer '" + entry + "'");
      }
    }
    spec.output_channels();
    return spec;
  }

  friend bool operator==(const ConvNetSpec&, const ConvNetSpec&) = default;
};

struct MultiScaleConfig {
  std::vector<std::size_t> scales{448, 224, 112};
  bool multi_scale = true;

  // Scales actually used, largest first. Single-scale mode keeps the
  // largest only.
  std::vector<std::size_t> active_scales() const {
    if (scales.empty()) throw Error("no input scales configured");
    std::vector<std::size_t> s = scales;
    std::sort(s.begin(), s.end(), std::greater<>{});
    if (std::find(s.begin(), s.end(), std::size_t{0}) != s.end()) {
      throw Error("input scales must be positive");
    }
    if (!multi_scale) s.resize(1);
    return s;
  }
};

template <typename T>
struct Extractor {
  ConvNetSpec spec;
  std::vector<Tensor<T>> weights;  // per conv: [out, in, kh, kw]
  std::vector<Tensor<T>> biases;   // per conv: [out]
  // Per-channel normalization applied to [0,1] pixels: (v - mean) / stddev.
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  std::size_t channels() const { return spec.output_channels(); }

  std::size_t feature_dim(const MultiScaleConfig& cfg) const {
    return cfg.active_scales().size() * channels();
  }

  void validate() const {
    spec.output_channels();
    std::size_t k = 0;
    if (weights.size() != spec.conv_count() || biases.size() != spec.conv_count()) {
      throw ShapeError("extractor has " + std::to_string(weights.size()) +
                       " weight tensors for " + std::to_string(spec.conv_count()) +
                       " conv layers");
    }
    for (const auto& l : spec.layers) {
      if (const auto* c = std::get_if<ConvLayer>(&l)) {
        const Shape ws{c->out_channels, c->in_channels, c->kernel_h, c->kernel_w};
        if (weights[k].shape() != ws || biases[k].shape() != Shape{c->out_channels}) {
          throw ShapeError("conv " + std::to_string(k) + " weight " +
                           to_string(weights[k].shape()) + " does not match " +
                           to_string(ws));
        }
        ++k;
      }
    }
    for (double s : stddev) {
      if (!(s > 0)) throw Error("extractor normalization stddev must be positive");
    }
  }

  template <typename U>
  Extractor<U> cast() const {
    Extractor<U> out;
    out.spec = spec;
    for (const auto& w : weights) out.weights.push_back(w.template cast<U>());
    for (const auto& b : biases) out.biases.push_back(b.template cast<U>());
    out.mean = mean;
    out.stddev = stddev;
    return out;
  }

  static std::string weight_name(std::size_t k) {
    return "extractor.conv" + std::to_string(k) + ".weight";
  }
  static std::string bias_name(std::size_t k) {
    return "extractor.conv" + std::to_string(k) + ".bias";
  }
};

// Seeded stand-in for pretrained weights: conv3x3(3->8), relu, maxpool 2,
// conv3x3(8->16), relu, maxpool 2, conv3x3(16->C), relu. First-layer kernels
// are zero-mean so responses come from local structure, not brightness.
inline Extractor<float> toy_extractor(std::uint64_t seed, std::size_t channels = 16) {
  Extractor<float> ex;
  ex.spec.layers = {ConvLayer{3, 3, 3, 8, 1, 1},  ReluLayer{}, MaxPoolLayer{2, 2},
                    ConvLayer{3, 3, 8, 16, 1, 1}, ReluLayer{}, MaxPoolLayer{2, 2},
                    ConvLayer{3, 3, 16, channels, 1, 1}, ReluLayer{}};
  ex.mean = {0.5, 0.5, 0.5};
  ex.stddev = {0.25, 0.25, 0.25};
  Rng rng(seed);
  std::size_t k = 0;
  for (const auto& l : ex.spec.layers) {
    const auto* c = std::get_if<ConvLayer>(&l);
    if (!c) continue;
    const std::size_t fan_in = c->in_channels * c->kernel_h * c->kernel_w;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<float> w(Shape{c->out_channels, c->in_channels, c->kernel_h, c->kernel_w});
    for (auto& v : w.values()) v = static_cast<float>(u(rng));
    if (k == 0) {
      const std::size_t taps = c->kernel_h * c->kernel_w;
      for (std::size_t o = 0; o < c->out_channels * c->in_channels; ++o) {
        double m = 0;
        for (std::size_t t = 0; t < taps; ++t) m += w[o * taps + t];
        m /= static_cast<double>(taps);
        for (std::size_t t = 0; t < taps; ++t) {
          w[o * taps + t] = static_cast<float>(w[o * taps + t] - m);
        }
      }
    }
    ex.weights.push_back(std::move(w));
    ex.biases.emplace_back(Shape{c->out_channels});
    ++k;
  }
  return ex;
}

// Appends the extractor to `g` for an [3,H,W] image node; returns the [D]
// feature node. Weights are graph parameters named extractor.conv<k>.*.
template <typename T>
autodiff::NodeId append_extractor(autodiff::Graph<T>& g, autodiff::NodeId image,
                                  const Extractor<T>& ex, const MultiScaleConfig& cfg) {
  ex.validate();
  std::vector<T> coeffs(3), offsets(3);
  for (std::size_t c = 0; c < 3; ++c) {
    coeffs[c] = static_cast<T>(1.0 / ex.stddev[c]);
    offsets[c] = static_cast<T>(-ex.mean[c] / ex.stddev[c]);
  }
  auto x0 = g.channel_affine(image, coeffs, offsets);
  std::vector<autodiff::NodeId> wnodes, bnodes;
  for (std::size_t k = 0; k < ex.weights.size(); ++k) {
    wnodes.push_back(g.parameter(Extractor<T>::weight_name(k), ex.weights[k].shape()));
    bnodes.push_back(g.parameter(Extractor<T>::bias_name(k), ex.biases[k].shape()));
  }
  std::vector<autodiff::NodeId> pooled;
  for (std::size_t s : cfg.active_scales()) {
    auto x = g.resize_bilinear(x0, s, s);
    std::size_t k = 0;
    for (const auto& l : ex.spec.layers) {
      if (const auto* c = std::get_if<ConvLayer>(&l)) {
        x = g.conv2d(x, wnodes[k], bnodes[k], c->stride, c->padding);
        ++k;
      } else if (const auto* p = std::get_if<MaxPoolLayer>(&l)) {
        x = g.max_pool2d(x, p->size, p->stride);
      } else {
        x = g.relu(x);
      }
    }
    pooled.push_back(g.global_avg_pool(x));
  }
  return pooled.size() == 1 ? pooled[0] : g.concat_last(pooled);
}

template <typename T>
void bind_extractor(autodiff::Feed<T>& feed, const Extractor<T>& ex) {
  for (std::size_t k = 0; k < ex.weights.size(); ++k) {
    feed.bind(Extractor<T>::weight_name(k), ex.weights[k]);
    feed.bind(Extractor<T>::bias_name(k), ex.biases[k]);
  }
}

// Reusable feature pipeline for images of one fixed size.
template <typename T>
class FeaturePipeline {
 public:
  FeaturePipeline(const Extractor<T>& ex, const MultiScaleConfig& cfg,
                  std::size_t height, std::size_t width)
      : ex_(&ex), height_(height), width_(width) {
    auto image = graph_.input("image", Shape{Image::channels, height, width});
    graph_.mark_output("features", append_extractor(graph_, image, ex, cfg));
  }

  Tensor<T> operator()(const Image& img) const {
    if (img.height != height_ || img.width != width_) {
      throw ShapeError("pipeline built for " + std::to_string(height_) + "x" +
                       std::to_string(width_) + " images, got " +
                       std::to_string(img.height) + "x" + std::to_string(img.width));
    }
    const Tensor<T> x = to_chw<T>(img);
    autodiff::Feed<T> feed;
    feed.bind("image", x);
    bind_extractor(feed, *ex_);
    autodiff::Session<T> s(graph_);
    s.forward(feed);
    return s.output("features");
  }

 private:
  const Extractor<T>* ex_;
  std::size_t height_;
  std::size_t width_;
  autodiff::Graph<T> graph_;
};

template <typename T>
Tensor<T> extract(const Image& img, const Extractor<T>& ex, const MultiScaleConfig& cfg) {
  return FeaturePipeline<T>(ex, cfg, img.height, img.width)(img);
}

// Gradient of nll(flow(extract(img))) with respect to every input pixel,
// as a [3,H,W] tensor (one plane per channel).
template <typename T>
Tensor<T> input_gradient(const Image& img, const Extractor<T>& ex,
                         const MultiScaleConfig& cfg, const FlowModel<T>& model) {
  autodiff::Graph<T> g;
  auto image = g.input("image", Shape{Image::channels, img.height, img.width});
  auto features = append_extractor(g, image, ex, cfg);
  const std::size_t dim = ex.feature_dim(cfg);
  if (dim != model.dim()) {
    throw ShapeError("extractor produces " + std::to_string(dim) +
                     " features but the flow expects " + std::to_string(model.dim()));
  }
  auto row = g.reshape(features, Shape{1, dim});
  auto [z, logdet] = append_flow(g, row, model);
  g.mark_output("nll", g.sum(g.sub(g.scale(g.squared_norm_last(z), T(0.5)), logdet)));

  const Tensor<T> x = to_chw<T>(img);
  autodiff::Feed<T> feed;
  feed.bind("image", x);
  bind_extractor(feed, ex);
  bind_flow(feed, model);
  autodiff::Session<T> s(g);
  s.forward(feed);
  return s.backward("nll").at("image");
}

}  // namespace differflow
