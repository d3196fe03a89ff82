#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "differflow/detect.hpp"
#include "differflow/metrics.hpp"

using namespace differflow;

namespace {

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w);
  for (auto& v : img.data) v = u(rng);
  return img;
}

AnomalyModel<double> toy_model(std::uint64_t seed) {
  AnomalyModel<double> m;
  m.extractor = toy_extractor(seed).cast<double>();
  m.scales.scales = {16, 8};
  FlowConfig fc;
  fc.dim = 32;
  fc.blocks = 2;
  fc.hidden_width = 16;
  fc.seed = seed;
  m.flow = make_flow<double>(fc);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (auto& [name, t] : m.flow.parameters()) {
    for (auto& v : t->values()) v = normal(rng);
  }
  return m;
}

double plain_nll(const Image& img, const AnomalyModel<double>& m) {
  const auto r = flow_forward(extract(img, *m.extractor, m.scales), m.flow);
  return nll(r.z, r.logdet.item());
}

}  // namespace

TEST(Classify, ThresholdExamples) {
  EXPECT_EQ(classify(2.0, 1.0), 1);
  EXPECT_EQ(classify(0.5, 1.0), 0);
  EXPECT_EQ(classify(1.0, 1.0), 1);
}

TEST(Classify, NonFiniteInputThrows) {
  EXPECT_THROW(classify(NAN, 1.0), NumericalError);
  EXPECT_THROW(classify(1.0, INFINITY), NumericalError);
}

TEST(Classify, MonotoneInScore) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int i = 0; i < 1000; ++i) {
    const double theta = u(rng), a = u(rng), b = u(rng);
    EXPECT_LE(classify(std::min(a, b), theta), classify(std::max(a, b), theta));
  }
}

TEST(AnomalyScore, IdentityTransformIsPlainNll) {
  const auto m = toy_model(2);
  const auto img = random_image(16, 16, 3);
  const auto rep = anomaly_score(img, m, {TransformSpec{}});
  ASSERT_EQ(rep.transform_nlls.size(), 1u);
  EXPECT_NEAR(rep.score, plain_nll(img, m), 1e-9);
}

TEST(AnomalyScore, DuplicatedListKeepsScore) {
  const auto m = toy_model(2);
  const auto img = random_image(16, 16, 4);
  const TransformSpec t{0.8, 1.05, 0.9};
  const auto once = anomaly_score(img, m, {t});
  const auto twice = anomaly_score(img, m, {t, t});
  EXPECT_NEAR(once.score, twice.score, 1e-12);
}

TEST(AnomalyScore, MeanOfComponentwiseNlls) {
  const auto m = toy_model(5);
  const auto img = random_image(16, 16, 6);
  const auto ts = sample_transforms(7, 4);
  const auto rep = anomaly_score(img, m, ts);
  double want = 0;
  for (const auto& t : ts) want += plain_nll(apply_transform(img, t), m) / 4;
  EXPECT_NEAR(rep.score, want, 1e-6);
  ASSERT_EQ(rep.transform_nlls.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(rep.transform_nlls[i], plain_nll(apply_transform(img, ts[i]), m), 1e-6);
  }
}

TEST(AnomalyScore, InvariantToTransformOrder) {
  const auto m = toy_model(8);
  const auto img = random_image(16, 16, 9);
  auto ts = sample_transforms(10, 5);
  const double a = anomaly_score(img, m, ts).score;
  std::reverse(ts.begin(), ts.end());
  EXPECT_NEAR(anomaly_score(img, m, ts).score, a, 1e-9);
}

TEST(AnomalyScore, ErrorCases) {
  const auto m = toy_model(1);
  EXPECT_THROW(anomaly_score(random_image(16, 16, 1), m, {}), Error);
  AnomalyModel<double> features_only;
  features_only.flow = m.flow;
  EXPECT_THROW(anomaly_score(random_image(16, 16, 1), features_only, {TransformSpec{}}), Error);
}

TEST(ScoreFeatureRecords, MeanOverFirstTransformIds) {
  FlowConfig fc;
  fc.dim = 2;
  fc.blocks = 1;
  fc.hidden_width = 4;
  const auto flow = make_flow<double>(fc);  // identity at initialization
  FeatureFile file;
  file.dim = 2;
  // {sample, label, transform id, values}
  file.records = {{"b", 0, 2, {1.0f, 1.0f}}, {"a", 1, 5, {2.0f, 0.0f}},
                  {"b", 0, 0, {3.0f, 1.0f}}, {"a", 1, 1, {0.0f, 0.0f}},
                  {"b", 0, 1, {0.0f, 0.0f}}};
  const auto one = score_feature_records(file, flow, 1);
  ASSERT_EQ(one.size(), 2u);
  EXPECT_EQ(one[0].sample_id, "b");
  EXPECT_DOUBLE_EQ(one[0].score, 5.0);  // transform 0: (3,1)
  EXPECT_EQ(one[1].sample_id, "a");
  EXPECT_DOUBLE_EQ(one[1].score, 0.0);  // transform 1: (0,0)
  EXPECT_EQ(one[1].label, 1);

  const auto two = score_feature_records(file, flow, 2);
  EXPECT_DOUBLE_EQ(two[0].score, (5.0 + 0.0) / 2);
  EXPECT_DOUBLE_EQ(two[1].score, (0.0 + 2.0) / 2);

  EXPECT_THROW(score_feature_records(file, flow, 3), Error);
  EXPECT_THROW(score_feature_records(file, flow, 0), Error);
  file.dim = 4;
  EXPECT_THROW(score_feature_records(file, flow, 1), ShapeError);
}

TEST(GaussianKernel, NormalizedSymmetricTruncated) {
  const auto k = gaussian_kernel(1.5);
  ASSERT_EQ(k.size(), 7u);  // radius ceil(3) = 3
  double s = 0;
  for (double v : k) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
  for (std::size_t i = 0; i < k.size(); ++i) EXPECT_DOUBLE_EQ(k[i], k[k.size() - 1 - i]);
  EXPECT_EQ(gaussian_kernel(0.0), std::vector<double>{1.0});
  EXPECT_THROW(gaussian_kernel(-1.0), Error);
}

TEST(GradientMap, SpikeGivesKernelOuterProduct) {
  const std::size_t h = 15, w = 17, py = 7, px = 6;
  Tensor<double> grad(Shape{3, h, w});
  grad[(1 * h + py) * w + px] = -2.5;
  const double sigma = 1.2;
  const auto k = gaussian_kernel(sigma);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto map = gradient_map(grad, sigma);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto dy = static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(py);
      const auto dx = static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(px);
      double want = 0;
      if (std::abs(dy) <= r && std::abs(dx) <= r) want = 2.5 * k[dy + r] * k[dx + r];
      EXPECT_NEAR(map.values[y * w + x], want, 1e-15);
    }
  }
  EXPECT_EQ(map.argmax(), py * w + px);
}

TEST(GradientMap, SumsAbsoluteChannelResponses) {
  Tensor<double> grad(Shape{2, 1, 1});
  grad[0] = 1.5;
  grad[1] = -0.5;
  EXPECT_DOUBLE_EQ(gradient_map(grad, 0.0).values[0], 2.0);
}

TEST(Localize, ZeroExtractorGivesZeroMap) {
  auto m = toy_model(3);
  for (auto& w : m.extractor->weights) w.fill(0.0);
  const auto map = localize(random_image(16, 16, 4), m, default_rotations(4), 1.0);
  for (double v : map.values) EXPECT_EQ(v, 0.0);
}

TEST(Localize, SingleZeroRotationIsBlurredGradient) {
  const auto m = toy_model(4);
  const auto img = random_image(16, 16, 5);
  const auto map = localize(img, m, {0.0}, 0.5);
  const auto direct = gradient_map(input_gradient(img, *m.extractor, m.scales, m.flow), 0.5);
  EXPECT_EQ(map.values, direct.values);
}

TEST(Localize, NonNegativeSameShapeDeterministic) {
  const auto m = toy_model(6);
  const auto img = random_image(16, 20, 7);
  const auto a = localize(img, m, default_rotations(8), 1.0);
  const auto b = localize(img, m, default_rotations(8), 1.0);
  EXPECT_EQ(a.height, 16u);
  EXPECT_EQ(a.width, 20u);
  EXPECT_EQ(a.values, b.values);
  for (double v : a.values) EXPECT_GE(v, 0.0);
  EXPECT_GT(a.max_value(), 0.0);
}

TEST(Localize, ErrorCases) {
  const auto m = toy_model(1);
  EXPECT_THROW(localize(random_image(16, 16, 1), m, {}, 1.0), Error);
  AnomalyModel<double> features_only;
  features_only.flow = m.flow;
  EXPECT_THROW(localize(random_image(16, 16, 1), features_only, {0.0}, 1.0), Error);
}

TEST(DefaultRotations, EvenlySpacedFromZero) {
  const auto r = default_rotations(4);
  ASSERT_EQ(r.size(), 4u);
  EXPECT_EQ(r[0], 0.0);
  EXPECT_NEAR(r[1], std::numbers::pi / 2, 1e-15);
  EXPECT_NEAR(r[3], 3 * std::numbers::pi / 2, 1e-15);
  EXPECT_THROW(default_rotations(0), Error);
  EXPECT_DOUBLE_EQ(default_blur_sigma(448), 7.0);
}

TEST(ThresholdSweep, ReproducesRocPoints) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> coarse(0, 20);
  std::vector<double> scores(120);
  std::vector<int> labels(120);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    labels[i] = static_cast<int>(i % 3 == 0);
    scores[i] = coarse(rng) + 3.0 * labels[i];
  }
  const auto curve = roc_curve(scores, labels);
  const double pos = 40, neg = 80;
  for (std::size_t p = 1; p < curve.points.size(); ++p) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (classify(scores[i], curve.points[p].threshold) == 1) (labels[i] ? tp : fp) += 1;
    }
    EXPECT_DOUBLE_EQ(curve.points[p].tpr, tp / pos);
    EXPECT_DOUBLE_EQ(curve.points[p].fpr, fp / neg);
  }
}
