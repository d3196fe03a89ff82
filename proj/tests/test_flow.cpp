#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <numbers>
#include <random>

#include "differflow/flow.hpp"
#include "differflow/training.hpp"
#include "oracles.hpp"

using namespace differflow;

namespace {

// Block whose subnets ignore their input: a single zero-weight layer whose
// bias emits (s, t).
template <typename T>
CouplingBlock<T> stub_block(std::size_t dim, std::vector<std::size_t> perm, T s1, T t1, T s2,
                            T t2, T alpha = T(3)) {
  const std::size_t half = dim / 2;
  auto subnet = [&](T s, T t) {
    Subnet<T> net;
    Tensor<T> bias(Shape{dim});
    for (std::size_t j = 0; j < half; ++j) {
      bias[j] = s;
      bias[half + j] = t;
    }
    net.layers.push_back({Tensor<T>(Shape{half, dim}), bias});
    return net;
  };
  CouplingBlock<T> blk;
  blk.permutation = std::move(perm);
  blk.subnet1 = subnet(s1, t1);
  blk.subnet2 = subnet(s2, t2);
  blk.alpha = alpha;
  return blk;
}

std::vector<std::size_t> identity_perm(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  return p;
}

// Replaces every parameter with N(0, sd^2) noise so blocks are far from the
// identity.
template <typename T>
void randomize(FlowModel<T>& model, std::uint64_t seed, double sd) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sd);
  for (auto& [name, t] : model.parameters()) {
    for (auto& v : t->values()) v = static_cast<T>(normal(rng));
  }
}

template <typename T>
Tensor<T> random_rows(std::size_t rows, std::size_t dim, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sd);
  Tensor<T> x(Shape{rows, dim});
  for (auto& v : x.values()) v = static_cast<T>(normal(rng));
  return x;
}

FlowConfig small_config(std::size_t dim, std::size_t blocks, std::size_t width,
                        std::uint64_t seed) {
  FlowConfig c;
  c.dim = dim;
  c.blocks = blocks;
  c.hidden_width = width;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(SoftClamp, ZeroMapsToZero) { EXPECT_EQ(soft_clamp(0.0, 3.0), 0.0); }

TEST(SoftClamp, AtAlphaGivesHalfAlpha) {
  // (6/pi) * atan(1) = (6/pi) * (pi/4) = 1.5
  EXPECT_NEAR(soft_clamp(3.0, 3.0), 1.5, 1e-12);
}

TEST(SoftClamp, ApproachesAlphaAsymptotically) {
  const double v = soft_clamp(1e6, 3.0);
  EXPECT_GT(v, 2.99);
  EXPECT_LT(v, 3.0);
  EXPECT_LT(soft_clamp(-1e6, 3.0), -2.99);
}

TEST(SoftClamp, NonPositiveAlphaThrows) {
  EXPECT_THROW(soft_clamp(1.0, 0.0), Error);
  EXPECT_THROW(soft_clamp(1.0, -2.0), Error);
  EXPECT_THROW(soft_clamp(Tensor<double>::vector({1.0}), 0.0), Error);
}

TEST(SoftClamp, OutputStrictlyInsideBound) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int i = 0; i < 1000; ++i) {
    const double v = soft_clamp(u(rng), 2.0);
    EXPECT_GT(v, -2.0);
    EXPECT_LT(v, 2.0);
  }
}

TEST(Coupling, ZeroSubnetsPermuteOnly) {
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  const auto blk = stub_block<double>(4, perm, 0, 0, 0, 0);
  const auto y = Tensor<double>::vector({10, 20, 30, 40});
  const auto r = coupling_forward(y, blk);
  EXPECT_EQ(r.z, Tensor<double>::vector({30, 10, 40, 20}));
  EXPECT_EQ(r.logdet.item(), 0.0);
  EXPECT_EQ(coupling_inverse(r.z, blk), y);
}

TEST(Coupling, HandEvaluatedStub) {
  // y2' = 2 * e^0 + 1 = 3, y1' = 1 * e^0 + 1 = 2
  const auto blk = stub_block<double>(2, identity_perm(2), 0, 1, 0, 1);
  const auto r = coupling_forward(Tensor<double>::vector({1, 2}), blk);
  EXPECT_EQ(r.z, Tensor<double>::vector({2, 3}));
  EXPECT_EQ(r.logdet.item(), 0.0);
  EXPECT_EQ(coupling_inverse(Tensor<double>::vector({2, 3}), blk),
            Tensor<double>::vector({1, 2}));
}

TEST(Coupling, RawScaleOfAlphaClampsToHalfAlpha) {
  const auto blk = stub_block<double>(2, identity_perm(2), 3, 0, 0, 0, 3);
  const auto r = coupling_forward(Tensor<double>::vector({1, 2}), blk);
  EXPECT_DOUBLE_EQ(r.z[0], 1.0);
  EXPECT_NEAR(r.z[1], 2 * std::exp(1.5), 1e-12);
  EXPECT_NEAR(r.logdet.item(), 1.5, 1e-12);

  const auto both = stub_block<double>(4, identity_perm(4), 3, 0, 3, 0, 3);
  EXPECT_NEAR(coupling_forward(Tensor<double>::vector({1, 1, 1, 1}), both).logdet.item(), 6.0,
              1e-12);
}

TEST(Coupling, OddDimensionThrows) {
  const auto blk = stub_block<double>(3, identity_perm(3), 0, 0, 0, 0);
  EXPECT_THROW(coupling_forward(Tensor<double>::vector({1, 2, 3}), blk), ShapeError);
  EXPECT_THROW(make_flow<double>(small_config(5, 1, 4, 0)), Error);
}

TEST(Coupling, DimensionMismatchThrows) {
  const auto model = make_flow<double>(small_config(4, 1, 4, 0));
  EXPECT_THROW(coupling_forward(Tensor<double>::vector({1, 2}), model.blocks[0]), ShapeError);
  EXPECT_THROW(coupling_inverse(Tensor<double>::vector({1, 2}), model.blocks[0]), ShapeError);
  EXPECT_THROW(flow_forward(Tensor<double>::vector({1, 2, 3, 4, 5, 6}), model), ShapeError);
  EXPECT_THROW(flow_inverse(Tensor<double>::vector({1, 2, 3, 4, 5, 6}), model), ShapeError);
}

TEST(Coupling, RoundTripThousandRandomInputs) {
  auto model = make_flow<float>(small_config(16, 1, 32, 4));
  randomize(model, 5, 0.3);
  const auto y = random_rows<float>(1000, 16, 6);
  const auto z = coupling_forward(y, model.blocks[0]).z;
  EXPECT_LT(max_abs_diff(coupling_inverse(z, model.blocks[0]), y), 1e-4);
}

TEST(Coupling, StoredScalesStayInsideClampBound) {
  auto model = make_flow<double>(small_config(8, 1, 16, 2));
  randomize(model, 3, 5.0);
  const auto tr = coupling_trace(random_rows<double>(200, 8, 4, 10.0), model.blocks[0]);
  const double alpha = model.blocks[0].alpha;
  for (double s : tr.s1.values()) {
    EXPECT_GT(s, -alpha);
    EXPECT_LT(s, alpha);
  }
  for (double s : tr.s2.values()) {
    EXPECT_GT(s, -alpha);
    EXPECT_LT(s, alpha);
  }
}

TEST(Flow, FreshModelIsComposedPermutation) {
  const auto model = make_flow<double>(small_config(6, 3, 8, 9));
  const auto y = random_rows<double>(1, 6, 1).reshaped(Shape{6});
  std::vector<double> expected(y.values());
  for (const auto& blk : model.blocks) {
    std::vector<double> next(6);
    for (std::size_t j = 0; j < 6; ++j) next[j] = expected[blk.permutation[j]];
    expected = next;
  }
  const auto r = flow_forward(y, model);
  EXPECT_EQ(r.z, Tensor<double>(Shape{6}, expected));
  EXPECT_EQ(r.logdet.item(), 0.0);
  EXPECT_EQ(flow_inverse(r.z, model), y);
}

TEST(Flow, ZeroLatentInvertsToZeroForFreshModel) {
  const auto model = make_flow<double>(small_config(8, 4, 8, 1));
  EXPECT_EQ(flow_inverse(Tensor<double>(Shape{8}), model), Tensor<double>(Shape{8}));
}

TEST(Flow, SingleBlockEqualsCouplingForward) {
  auto model = make_flow<double>(small_config(8, 1, 16, 3));
  randomize(model, 4, 0.5);
  const auto y = random_rows<double>(5, 8, 5);
  const auto a = flow_forward(y, model);
  const auto b = coupling_forward(y, model.blocks[0]);
  EXPECT_EQ(a.z, b.z);
  EXPECT_EQ(a.logdet, b.logdet);
}

TEST(Flow, LogdetIsSumOfBlockLogdets) {
  auto model = make_flow<double>(small_config(8, 3, 16, 3));
  randomize(model, 6, 0.4);
  const auto y = random_rows<double>(4, 8, 7);
  Tensor<double> x = y;
  Tensor<double> total(Shape{4});
  for (const auto& blk : model.blocks) {
    const auto r = coupling_forward(x, blk);
    for (std::size_t i = 0; i < 4; ++i) total[i] += r.logdet[i];
    x = r.z;
  }
  const auto r = flow_forward(y, model);
  EXPECT_LT(max_abs_diff(r.logdet, total), 1e-12);
  EXPECT_EQ(r.z, x);
}

TEST(Flow, BijectiveInDoublePrecision) {
  auto model = make_flow<double>(small_config(16, 4, 32, 8));
  randomize(model, 9, 0.1);
  const auto y = random_rows<double>(500, 16, 10);
  EXPECT_LT(max_abs_diff(flow_inverse(flow_forward(y, model).z, model), y), 1e-9);
}

TEST(Flow, BijectiveEightBlocksDim64) {
  auto model = make_flow<float>(small_config(64, 8, 64, 11));
  randomize(model, 12, 0.1);
  const auto y = random_rows<float>(1000, 64, 13);
  const auto t0 = std::chrono::steady_clock::now();
  const auto back = flow_inverse(flow_forward(y, model).z, model);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(max_abs_diff(back, y), 1e-4);
  EXPECT_LT(seconds, 10.0);
}

TEST(Flow, LogdetMatchesNumericalJacobian) {
  for (std::size_t dim : {2u, 4u, 8u}) {
    for (std::uint64_t c = 0; c < 50; ++c) {
      auto model = make_flow<double>(small_config(dim, 2, 16, 100 + c));
      randomize(model, 200 + c, 0.4);
      const auto y = random_rows<double>(1, dim, 300 + c).reshaped(Shape{dim});
      const auto f = [&](const std::vector<double>& x) {
        return flow_forward(Tensor<double>(Shape{dim}, x), model).z.values();
      };
      const double numeric = oracle::log_abs_det(oracle::jacobian(f, y.values()), dim);
      const double analytic = flow_forward(y, model).logdet.item();
      ASSERT_NEAR(analytic, numeric, 1e-3) << "dim " << dim << " case " << c;
    }
  }
}

TEST(Flow, PermutationsArePureFunctionOfSeed) {
  const auto a = make_flow<float>(small_config(32, 4, 8, 77));
  const auto b = make_flow<float>(small_config(32, 4, 8, 77));
  const auto c = make_flow<float>(small_config(32, 4, 8, 78));
  bool differs = false;
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.blocks[i].permutation, b.blocks[i].permutation);
    differs |= a.blocks[i].permutation != c.blocks[i].permutation;
    auto sorted = a.blocks[i].permutation;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, identity_perm(32));
  }
  EXPECT_TRUE(differs);
  for (const auto& [name, t] : a.parameters()) {
    bool same = false;
    for (const auto& [n2, t2] : b.parameters()) same |= n2 == name && *t2 == *t;
    EXPECT_TRUE(same) << name;
  }
}

TEST(Flow, SubnetShapesAndZeroFinalLayer) {
  const auto model = make_flow<float>(small_config(12, 2, 20, 5));
  for (const auto& blk : model.blocks) {
    for (const auto* net : {&blk.subnet1, &blk.subnet2}) {
      ASSERT_EQ(net->layers.size(), 4u);
      EXPECT_EQ(net->layers[0].weight.shape(), (Shape{6, 20}));
      EXPECT_EQ(net->layers[1].weight.shape(), (Shape{20, 20}));
      EXPECT_EQ(net->layers[2].weight.shape(), (Shape{20, 20}));
      EXPECT_EQ(net->layers[3].weight.shape(), (Shape{20, 12}));
      EXPECT_EQ(net->layers[3].weight, Tensor<float>(Shape{20, 12}));
      EXPECT_EQ(net->layers[3].bias, Tensor<float>(Shape{12}));
      EXPECT_FALSE(net->layers[0].weight == Tensor<float>(Shape{6, 20}));
    }
  }
}

TEST(Flow, GraphMatchesDirectEvaluation) {
  auto model = make_flow<double>(small_config(8, 3, 16, 21));
  randomize(model, 22, 0.4);
  const auto y = random_rows<double>(6, 8, 23);
  const auto g = build_nll_graph(model);
  autodiff::Feed<double> feed;
  bind_flow(feed, model);
  feed.bind("y", y);
  const auto out = autodiff::evaluate(g, feed);
  const auto r = flow_forward(y, model);
  EXPECT_LT(max_abs_diff(out.at("z"), r.z), 1e-12);
  EXPECT_LT(max_abs_diff(out.at("logdet"), r.logdet), 1e-12);
}

TEST(Flow, CastPreservesStructure) {
  auto model = make_flow<double>(small_config(8, 2, 8, 1));
  randomize(model, 2, 0.3);
  const auto f = model.cast<float>();
  EXPECT_EQ(f.parameter_count(), model.parameter_count());
  const auto y = random_rows<double>(3, 8, 4);
  EXPECT_LT(max_abs_diff(flow_forward(y.cast<float>(), f).z.cast<double>(),
                         flow_forward(y, model).z),
            1e-4);
}
