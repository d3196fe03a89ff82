#pragma once

// Maximum-likelihood training of a FlowModel with Adam.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "differflow/autodiff.hpp"
#include "differflow/flow.hpp"
#include "differflow/random.hpp"
#include "differflow/tensor.hpp"

namespace differflow {

struct AdamConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t epochs = 192;
  std::size_t batch_size = 96;
  AdamConfig adam;
  std::size_t blocks = 8;
  double clamp_alpha = 3.0;
  std::size_t subnet_width = 2048;
  std::uint64_t seed = 0;
  // Fraction of a fixed feature set held out for reporting. Never used for
  // model selection.
  double holdout_fraction = 0.1;
  // Abort when a batch loss exceeds this or turns non-finite.
  double divergence_limit = 1e6;
};

// ||z||^2 / 2 - logdet. The constant D/2 log(2 pi) is omitted.
template <typename T>
T nll(const Tensor<T>& z, T logdet) {
  if (!z.all_finite() || !std::isfinite(logdet)) {
    throw NumericalError("nll: non-finite input");
  }
  T sq = 0;
  for (T v : z.values()) sq += v * v;
  return sq / T(2) - logdet;
}

// Per-row NLL of a flow result.
template <typename T>
std::vector<double> nll_rows(const FlowResult<T>& r) {
  const std::size_t rows = r.logdet.size();
  const std::size_t dim = r.z.size() / rows;
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    Tensor<T> zi(Shape{dim}, std::vector<T>(r.z.values().begin() + i * dim,
                                            r.z.values().begin() + (i + 1) * dim));
    out[i] = static_cast<double>(nll(zi, r.logdet[i]));
  }
  return out;
}

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::size_t t = 0;
};

// One bias-corrected Adam update. Moments are created on the first call.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params,
               const std::vector<const Tensor<T>*>& grads, AdamState<T>& state,
               const AdamConfig& cfg) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) +
                     " parameters but " + std::to_string(grads.size()) +
                     " gradients");
  }
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: state does not match parameter list");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k]->shape() != grads[k]->shape() ||
        state.m[k].shape() != params[k]->shape()) {
      throw ShapeError("adam_step: shape mismatch at parameter " +
                       std::to_string(k));
    }
  }
  ++state.t;
  const double bc1 = 1 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    const auto& g = *grads[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      p[i] -= static_cast<T>(cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// Graph of the NLL over a batch. Input "y" [B,D]; outputs "z", "logdet",
// "nll" (per row) and "loss" (sum over rows; seed backward with 1/B for the
// batch mean).
template <typename T>
autodiff::Graph<T> build_nll_graph(const FlowModel<T>& model) {
  autodiff::Graph<T> g;
  auto y = g.input("y", Shape{autodiff::kAnyDim, model.dim()});
  auto [z, logdet] = append_flow(g, y, model);
  auto per_row = g.sub(g.scale(g.squared_norm_last(z), T(0.5)), logdet);
  g.mark_output("z", z);
  g.mark_output("logdet", logdet);
  g.mark_output("nll", per_row);
  g.mark_output("loss", g.sum(per_row));
  return g;
}

template <typename T>
struct TrainResult {
  FlowModel<T> model;
  std::vector<double> loss_history;  // mean training NLL per epoch
  std::optional<double> holdout_nll;
};

// Supplies the [N,D] training features for a given epoch. Image pipelines
// resample transforms here; fixed feature sets return the same tensor.
template <typename T>
using EpochSource = std::function<Tensor<T>(std::size_t epoch)>;

using EpochCallback = std::function<void(std::size_t epoch, double mean_nll)>;

template <typename T>
FlowConfig flow_config_for(const TrainConfig& cfg, std::size_t dim) {
  FlowConfig fc;
  fc.dim = dim;
  fc.blocks = cfg.blocks;
  fc.hidden_width = cfg.subnet_width;
  fc.clamp_alpha = cfg.clamp_alpha;
  fc.seed = derive_seed(cfg.seed, SeedStream::FlowInit);
  return fc;
}

template <typename T>
double mean_nll(const Tensor<T>& features, const FlowModel<T>& model) {
  const auto rows = nll_rows(flow_forward(features, model));
  double s = 0;
  for (double v : rows) s += v;
  return s / static_cast<double>(rows.size());
}

template <typename T>
TrainResult<T> train(const EpochSource<T>& source, std::size_t dim,
                     const TrainConfig& cfg,
                     const std::optional<Tensor<T>>& holdout = std::nullopt,
                     const EpochCallback& on_epoch = {}) {
  if (cfg.batch_size == 0) throw Error("batch_size must be positive");
  TrainResult<T> result{make_flow<T>(flow_config_for<T>(cfg, dim)), {}, {}};
  auto& model = result.model;
  const auto graph = build_nll_graph(model);
  auto named = model.parameters();
  std::vector<Tensor<T>*> params;
  for (auto& [name, t] : named) params.push_back(t);

  autodiff::Feed<T> feed;
  bind_flow(feed, model);
  AdamState<T> adam;
  Rng shuffle_rng(derive_seed(cfg.seed, SeedStream::Shuffle));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Tensor<T> data = source(epoch);
    if (data.rank() != 2 || data.dim(1) != dim) {
      throw ShapeError("training features must be [N," + std::to_string(dim) +
                       "], got " + to_string(data.shape()));
    }
    const std::size_t n = data.dim(0);
    if (n == 0) throw Error("empty training set");
    const auto order = random_permutation(n, shuffle_rng);
    double epoch_sum = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, n - start);
      Tensor<T> batch(Shape{b, dim});
      for (std::size_t r = 0; r < b; ++r) {
        std::copy_n(data.values().begin() + order[start + r] * dim, dim,
                    batch.values().begin() + r * dim);
      }
      feed.bind("y", batch);
      autodiff::Session<T> session(graph);
      session.forward(feed);
      const double batch_mean =
          static_cast<double>(session.output("loss").item()) / static_cast<double>(b);
      if (!std::isfinite(batch_mean) || batch_mean > cfg.divergence_limit) {
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) +
                             ", batch starting at " + std::to_string(start) +
                             ": mean NLL " + std::to_string(batch_mean));
      }
      // Gradient of the batch mean.
      const auto grads = session.backward(
          "loss", Tensor<T>::scalar(T(1) / static_cast<T>(b)));
      std::vector<const Tensor<T>*> gptr;
      for (const auto& [name, t] : named) gptr.push_back(&grads.at(name));
      adam_step(params, gptr, adam, cfg.adam);
      epoch_sum += batch_mean * static_cast<double>(b);
    }
    const double epoch_mean = epoch_sum / static_cast<double>(n);
    result.loss_history.push_back(epoch_mean);
    if (on_epoch) on_epoch(epoch, epoch_mean);
  }
  if (holdout && holdout->dim(0) > 0) result.holdout_nll = mean_nll(*holdout, model);
  return result;
}

// Rows of `x` selected by `idx`.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  const std::size_t dim = x.dim(1);
  Tensor<T> out(Shape{idx.size(), dim});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(x.values().begin() + idx[r] * dim, dim,
                out.values().begin() + r * dim);
  }
  return out;
}

// Train on a fixed [N,D] feature matrix, holding out
// cfg.holdout_fraction of the rows (seeded) for reporting.
template <typename T>
TrainResult<T> train(const Tensor<T>& features, const TrainConfig& cfg,
                     const EpochCallback& on_epoch = {}) {
  if (features.rank() != 2 || features.dim(0) == 0) {
    throw Error("empty training set");
  }
  const std::size_t n = features.dim(0);
  auto holdout_count = static_cast<std::size_t>(
      std::floor(cfg.holdout_fraction * static_cast<double>(n)));
  if (holdout_count >= n) holdout_count = 0;
  std::optional<Tensor<T>> holdout;
  Tensor<T> train_set = features;
  if (holdout_count > 0) {
    Rng rng(derive_seed(cfg.seed, SeedStream::Holdout));
    auto order = random_permutation(n, rng);
    std::vector<std::size_t> held(order.begin(), order.begin() + holdout_count);
    std::vector<std::size_t> kept(order.begin() + holdout_count, order.end());
    std::sort(held.begin(), held.end());
    std::sort(kept.begin(), kept.end());
    holdout = gather_rows(features, held);
    train_set = gather_rows(features, kept);
  }
  return train<T>([&](std::size_t) { return train_set; }, features.dim(1), cfg,
                  holdout, on_epoch);
}

}  // namespace differflow
