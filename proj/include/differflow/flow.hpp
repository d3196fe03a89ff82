#pragma once

// Real-NVP normalizing flow with soft-clamped affine coupling blocks.
//
// Each block permutes its input with a fixed random permutation, splits it
// into equal halves (y1, y2) and applies
//
//   o2 = y2 * exp(s1(y1)) + t1(y1)
//   o1 = y1 * exp(s2(o2)) + t2(o2)
//
// where each subnet is a dense network D/2 -> D whose output is split into
// a scale half s (passed through soft_clamp) and a shift half t. The block
// log-determinant is the sum of the clamped scale coefficients.
//
// Two evaluation routes exist: direct value functions (flow_forward /
// flow_inverse) and a differentiable graph (append_flow) used for training
// and input gradients. Both read the same parameters.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "differflow/autodiff.hpp"
#include "differflow/random.hpp"
#include "differflow/tensor.hpp"

namespace differflow {

// (2 alpha / pi) * arctan(h / alpha); maps the reals into (-alpha, alpha).
template <typename T>
T soft_clamp(T h, T alpha) {
  if (!(alpha > T(0))) throw Error("soft_clamp: alpha must be positive");
  return T(2) * alpha / std::numbers::pi_v<T> * std::atan(h / alpha);
}

template <typename T>
Tensor<T> soft_clamp(const Tensor<T>& h, T alpha) {
  Tensor<T> out = h;
  for (auto& v : out.values()) v = soft_clamp(v, alpha);
  return out;
}

// Row-vector dense layer: out = in * weight + bias, weight [in, out].
template <typename T>
struct DenseLayer {
  Tensor<T> weight;
  Tensor<T> bias;
};

// Dense network with relu between layers and a linear final layer.
template <typename T>
struct Subnet {
  std::vector<DenseLayer<T>> layers;
};

template <typename T>
struct CouplingBlock {
  std::vector<std::size_t> permutation;
  Subnet<T> subnet1;  // regresses (s1, t1) from the first half
  Subnet<T> subnet2;  // regresses (s2, t2) from the transformed second half
  T alpha = T(3);

  std::size_t dim() const { return permutation.size(); }
};

struct FlowConfig {
  std::size_t dim = 768;
  std::size_t blocks = 8;
  std::size_t hidden_width = 2048;
  std::size_t hidden_layers = 3;
  double clamp_alpha = 3.0;
  std::uint64_t seed = 0;
};

template <typename T>
struct FlowModel {
  FlowConfig config;
  std::vector<CouplingBlock<T>> blocks;

  std::size_t dim() const { return config.dim; }

  // Named views of every trainable tensor, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      for (int k = 1; k <= 2; ++k) {
        auto& net = k == 1 ? blocks[b].subnet1 : blocks[b].subnet2;
        for (std::size_t l = 0; l < net.layers.size(); ++l) {
          const std::string base = parameter_prefix(b, k, l);
          out.emplace_back(base + ".weight", &net.layers[l].weight);
          out.emplace_back(base + ".bias", &net.layers[l].bias);
        }
      }
    }
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> parameters() const {
    auto named = const_cast<FlowModel*>(this)->parameters();
    return {named.begin(), named.end()};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t->size();
    return n;
  }

  template <typename U>
  FlowModel<U> cast() const {
    FlowModel<U> out;
    out.config = config;
    for (const auto& blk : blocks) {
      CouplingBlock<U> b;
      b.permutation = blk.permutation;
      b.alpha = static_cast<U>(blk.alpha);
      for (const auto& l : blk.subnet1.layers) {
        b.subnet1.layers.push_back({l.weight.template cast<U>(), l.bias.template cast<U>()});
      }
      for (const auto& l : blk.subnet2.layers) {
        b.subnet2.layers.push_back({l.weight.template cast<U>(), l.bias.template cast<U>()});
      }
      out.blocks.push_back(std::move(b));
    }
    return out;
  }

  static std::string parameter_prefix(std::size_t block, int subnet,
                                      std::size_t layer) {
    return "flow.block" + std::to_string(block) + ".subnet" +
           std::to_string(subnet) + ".dense" + std::to_string(layer);
  }
};

namespace detail {

template <typename T>
Subnet<T> make_subnet(std::size_t in, std::size_t out, std::size_t width,
                      std::size_t hidden_layers, Rng& rng) {
  Subnet<T> net;
  std::size_t fan_in = in;
  for (std::size_t l = 0; l < hidden_layers; ++l) {
    // He-uniform
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer<T> layer{Tensor<T>(Shape{fan_in, width}), Tensor<T>(Shape{width})};
    for (auto& w : layer.weight.values()) w = static_cast<T>(u(rng));
    net.layers.push_back(std::move(layer));
    fan_in = width;
  }
  // Zero final layer: every block starts as the identity.
  net.layers.push_back({Tensor<T>(Shape{fan_in, out}), Tensor<T>(Shape{out})});
  return net;
}

template <typename T>
Tensor<T> as_batch(const Tensor<T>& y, std::size_t dim) {
  if (y.rank() == 1 && y.dim(0) == dim) return y.reshaped(Shape{1, dim});
  if (y.rank() == 2 && y.dim(1) == dim) return y;
  throw ShapeError("flow expects [" + std::to_string(dim) + "] or [B," +
                   std::to_string(dim) + "], got " + to_string(y.shape()));
}

template <typename T>
Tensor<T> columns(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t rows = x.dim(0), cols = x.dim(1), w = end - begin;
  Tensor<T> out(Shape{rows, w});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x[r * cols + begin + j];
  }
  return out;
}

template <typename T>
Tensor<T> join_columns(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor<T> out(Shape{rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < ca; ++j) out[r * (ca + cb) + j] = a[r * ca + j];
    for (std::size_t j = 0; j < cb; ++j) out[r * (ca + cb) + ca + j] = b[r * cb + j];
  }
  return out;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const DenseLayer<T>& layer, bool relu) {
  const std::size_t rows = x.dim(0), in = x.dim(1), out_dim = layer.weight.dim(1);
  if (layer.weight.dim(0) != in) {
    throw ShapeError("dense layer expects " + std::to_string(layer.weight.dim(0)) +
                     " inputs, got " + std::to_string(in));
  }
  Tensor<T> out(Shape{rows, out_dim});
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out.data().data() + r * out_dim;
    for (std::size_t j = 0; j < out_dim; ++j) o[j] = layer.bias[j];
    for (std::size_t p = 0; p < in; ++p) {
      const T xv = x[r * in + p];
      if (xv == T(0)) continue;
      const T* w = layer.weight.data().data() + p * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) o[j] += xv * w[j];
    }
    if (relu) {
      for (std::size_t j = 0; j < out_dim; ++j) o[j] = o[j] > T(0) ? o[j] : T(0);
    }
  }
  return out;
}

template <typename T>
Tensor<T> run_subnet(const Tensor<T>& x, const Subnet<T>& net) {
  Tensor<T> h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    h = dense(h, net.layers[l], l + 1 < net.layers.size());
  }
  return h;
}

// Clamped scale and raw shift halves of a subnet output.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> scale_shift(const Tensor<T>& x,
                                            const Subnet<T>& net, T alpha,
                                            std::size_t half) {
  Tensor<T> r = run_subnet(x, net);
  if (r.dim(1) != 2 * half) {
    throw ShapeError("subnet output width " + std::to_string(r.dim(1)) +
                     " != " + std::to_string(2 * half));
  }
  return {soft_clamp(columns(r, 0, half), alpha), columns(r, half, 2 * half)};
}

}  // namespace detail

template <typename T>
FlowModel<T> make_flow(const FlowConfig& cfg) {
  if (cfg.dim == 0 || cfg.dim % 2 != 0) {
    throw ShapeError("flow dimension must be even and positive, got " +
                     std::to_string(cfg.dim));
  }
  if (cfg.blocks == 0 || cfg.hidden_width == 0) {
    throw Error("flow needs at least one block and a positive hidden width");
  }
  if (!(cfg.clamp_alpha > 0)) throw Error("clamp alpha must be positive");
  FlowModel<T> model;
  model.config = cfg;
  Rng rng(cfg.seed);
  const std::size_t half = cfg.dim / 2;
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    CouplingBlock<T> blk;
    blk.permutation = random_permutation(cfg.dim, rng);
    blk.subnet1 = detail::make_subnet<T>(half, cfg.dim, cfg.hidden_width,
                                         cfg.hidden_layers, rng);
    blk.subnet2 = detail::make_subnet<T>(half, cfg.dim, cfg.hidden_width,
                                         cfg.hidden_layers, rng);
    blk.alpha = static_cast<T>(cfg.clamp_alpha);
    model.blocks.push_back(std::move(blk));
  }
  return model;
}

// Output of a forward pass. For a [D] input, z is [D] and logdet a scalar;
// for a [B,D] batch, z is [B,D] and logdet is [B].
template <typename T>
struct FlowResult {
  Tensor<T> z;
  Tensor<T> logdet;
};

// Forward pass of one block that also keeps the clamped scales.
template <typename T>
struct CouplingTrace {
  Tensor<T> out;     // [B,D]
  Tensor<T> logdet;  // [B]
  Tensor<T> s1;      // [B,D/2]
  Tensor<T> s2;      // [B,D/2]
};

template <typename T>
CouplingTrace<T> coupling_trace(const Tensor<T>& y, const CouplingBlock<T>& blk) {
  const std::size_t dim = blk.dim();
  if (dim == 0 || dim % 2 != 0) throw ShapeError("coupling block needs even D");
  const Tensor<T> x = detail::as_batch(y, dim);
  const std::size_t rows = x.dim(0), half = dim / 2;
  Tensor<T> p(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < dim; ++j) p[r * dim + j] = x[r * dim + blk.permutation[j]];
  }
  const Tensor<T> y1 = detail::columns(p, 0, half);
  const Tensor<T> y2 = detail::columns(p, half, dim);

  auto [s1, t1] = detail::scale_shift(y1, blk.subnet1, blk.alpha, half);
  Tensor<T> o2(y2.shape());
  for (std::size_t i = 0; i < o2.size(); ++i) o2[i] = y2[i] * std::exp(s1[i]) + t1[i];

  auto [s2, t2] = detail::scale_shift(o2, blk.subnet2, blk.alpha, half);
  Tensor<T> o1(y1.shape());
  for (std::size_t i = 0; i < o1.size(); ++i) o1[i] = y1[i] * std::exp(s2[i]) + t2[i];

  Tensor<T> logdet(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t j = 0; j < half; ++j) acc += s1[r * half + j] + s2[r * half + j];
    logdet[r] = acc;
  }
  return {detail::join_columns(o1, o2), std::move(logdet), std::move(s1), std::move(s2)};
}

template <typename T>
FlowResult<T> coupling_forward(const Tensor<T>& y, const CouplingBlock<T>& blk) {
  auto tr = coupling_trace(y, blk);
  if (y.rank() == 1) {
    return {tr.out.reshaped(y.shape()), Tensor<T>::scalar(tr.logdet[0])};
  }
  return {std::move(tr.out), std::move(tr.logdet)};
}

template <typename T>
Tensor<T> coupling_inverse(const Tensor<T>& out, const CouplingBlock<T>& blk) {
  const std::size_t dim = blk.dim();
  if (dim == 0 || dim % 2 != 0) throw ShapeError("coupling block needs even D");
  const Tensor<T> o = detail::as_batch(out, dim);
  const std::size_t rows = o.dim(0), half = dim / 2;
  const Tensor<T> o1 = detail::columns(o, 0, half);
  const Tensor<T> o2 = detail::columns(o, half, dim);

  auto [s2, t2] = detail::scale_shift(o2, blk.subnet2, blk.alpha, half);
  Tensor<T> y1(o1.shape());
  for (std::size_t i = 0; i < y1.size(); ++i) y1[i] = (o1[i] - t2[i]) * std::exp(-s2[i]);

  auto [s1, t1] = detail::scale_shift(y1, blk.subnet1, blk.alpha, half);
  Tensor<T> y2(o2.shape());
  for (std::size_t i = 0; i < y2.size(); ++i) y2[i] = (o2[i] - t1[i]) * std::exp(-s1[i]);

  const Tensor<T> p = detail::join_columns(y1, y2);
  Tensor<T> y(p.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < dim; ++j) y[r * dim + blk.permutation[j]] = p[r * dim + j];
  }
  return out.rank() == 1 ? y.reshaped(out.shape()) : y;
}

template <typename T>
FlowResult<T> flow_forward(const Tensor<T>& y, const FlowModel<T>& model) {
  Tensor<T> x = detail::as_batch(y, model.dim());
  Tensor<T> logdet(Shape{x.dim(0)});
  for (const auto& blk : model.blocks) {
    auto tr = coupling_trace(x, blk);
    for (std::size_t r = 0; r < logdet.size(); ++r) logdet[r] += tr.logdet[r];
    x = std::move(tr.out);
  }
  if (y.rank() == 1) return {x.reshaped(y.shape()), Tensor<T>::scalar(logdet[0])};
  return {std::move(x), std::move(logdet)};
}

template <typename T>
Tensor<T> flow_inverse(const Tensor<T>& z, const FlowModel<T>& model) {
  Tensor<T> x = detail::as_batch(z, model.dim());
  for (auto it = model.blocks.rbegin(); it != model.blocks.rend(); ++it) {
    x = coupling_inverse(x, *it);
  }
  return z.rank() == 1 ? x.reshaped(z.shape()) : x;
}

// Graph nodes produced by append_flow.
struct FlowNodes {
  autodiff::NodeId z;       // [B,D]
  autodiff::NodeId logdet;  // [B]
};

// Appends the flow to `g`, reading a [B,D] node. Parameters are declared as
// graph parameters named after FlowModel::parameters().
template <typename T>
FlowNodes append_flow(autodiff::Graph<T>& g, autodiff::NodeId y,
                      const FlowModel<T>& model) {
  const std::size_t dim = model.dim(), half = dim / 2;
  auto subnet = [&](autodiff::NodeId x, const Subnet<T>& net, T alpha,
                    std::size_t b, int k) {
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      const std::string base = FlowModel<T>::parameter_prefix(b, k, l);
      auto w = g.parameter(base + ".weight", net.layers[l].weight.shape());
      auto bias = g.parameter(base + ".bias", net.layers[l].bias.shape());
      x = g.add(g.matmul(x, w), bias);
      if (l + 1 < net.layers.size()) x = g.relu(x);
    }
    auto s = g.slice_last(x, 0, half);
    s = g.scale(g.arctan(g.scale(s, T(1) / alpha)),
                T(2) * alpha / std::numbers::pi_v<T>);
    return std::pair{s, g.slice_last(x, half, dim)};
  };

  std::optional<autodiff::NodeId> logdet;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto& blk = model.blocks[b];
    auto p = g.permute(y, blk.permutation);
    auto y1 = g.slice_last(p, 0, half);
    auto y2 = g.slice_last(p, half, dim);
    auto [s1, t1] = subnet(y1, blk.subnet1, blk.alpha, b, 1);
    auto o2 = g.add(g.mul(y2, g.exp(s1)), t1);
    auto [s2, t2] = subnet(o2, blk.subnet2, blk.alpha, b, 2);
    auto o1 = g.add(g.mul(y1, g.exp(s2)), t2);
    y = g.concat_last({o1, o2});
    auto ld = g.add(g.sum_last(s1), g.sum_last(s2));
    logdet = logdet ? g.add(*logdet, ld) : ld;
  }
  return {y, *logdet};
}

template <typename T>
void bind_flow(autodiff::Feed<T>& feed, const FlowModel<T>& model) {
  for (const auto& [name, t] : model.parameters()) feed.bind(name, *t);
}

}  // namespace differflow
