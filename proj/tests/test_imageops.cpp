#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "differflow/dataset.hpp"
#include "differflow/image.hpp"
#include "differflow/png.hpp"

using namespace differflow;

namespace {

constexpr double kPi = std::numbers::pi;

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w);
  for (auto& v : img.data) v = u(rng);
  return img;
}

// Low-frequency pattern; bilinear resampling error stays well below 1e-3.
Image smooth_image(std::size_t n) {
  Image img(n, n);
  const double f = 2 * kPi / static_cast<double>(n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      for (std::size_t c = 0; c < Image::channels; ++c) {
        img.at(y, x, c) = static_cast<float>(
            0.5 + 0.2 * std::sin(f * static_cast<double>(x) + static_cast<double>(c)) *
                      std::cos(f * static_cast<double>(y)));
      }
    }
  }
  return img;
}

double max_interior_error(const Image& a, const Image& b, std::size_t margin) {
  double worst = 0;
  for (std::size_t y = margin; y + margin < a.height; ++y) {
    for (std::size_t x = margin; x + margin < a.width; ++x) {
      for (std::size_t c = 0; c < Image::channels; ++c) {
        worst = std::max(worst, std::abs(static_cast<double>(a.at(y, x, c)) - b.at(y, x, c)));
      }
    }
  }
  return worst;
}

// Over the disc of diameter 90% of the side about the centre; rotations
// keep that disc inside the frame.
double max_disc_error(const Image& a, const Image& b) {
  const double cy = (static_cast<double>(a.height) - 1) / 2;
  const double cx = (static_cast<double>(a.width) - 1) / 2;
  const double r = 0.45 * static_cast<double>(std::min(a.height, a.width));
  double worst = 0;
  for (std::size_t y = 0; y < a.height; ++y) {
    for (std::size_t x = 0; x < a.width; ++x) {
      if (std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cx) > r) continue;
      for (std::size_t c = 0; c < Image::channels; ++c) {
        worst = std::max(worst, std::abs(static_cast<double>(a.at(y, x, c)) - b.at(y, x, c)));
      }
    }
  }
  return worst;
}

bool in_unit_range(const Image& img) {
  for (float v : img.data) {
    if (!(v >= 0.0f && v <= 1.0f)) return false;
  }
  return true;
}

class TempDir {
 public:
  TempDir() {
    path_ = std::filesystem::temp_directory_path() /
            ("differflow_imageops_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace

TEST(Rotate, ZeroAngleIsBitIdentical) {
  const auto img = random_image(13, 17, 1);
  EXPECT_EQ(rotate(img, 0.0), img);
}

TEST(Rotate, HalfTurnTwiceRestoresImage) {
  const auto img = random_image(20, 24, 2);
  const auto back = rotate(rotate(img, kPi), kPi);
  EXPECT_LT(max_interior_error(img, back, 2), 1e-3);
}

TEST(Rotate, QuarterTurnIsIndexPermutation) {
  const std::size_t n = 9;
  const auto img = random_image(n, n, 3);
  const auto r = rotate(img, kPi / 2);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      for (std::size_t c = 0; c < Image::channels; ++c) {
        EXPECT_NEAR(r.at(y, x, c), img.at(n - 1 - x, y, c), 1e-6);
      }
    }
  }
}

TEST(Rotate, ForwardThenBackRestoresInterior) {
  const std::size_t n = 64;
  const auto img = smooth_image(n);
  for (double a : {0.3, 1.0, 2.5, 4.0, 5.9}) {
    const auto back = rotate(rotate(img, a), -a);
    EXPECT_LT(max_disc_error(img, back), 2e-3) << "angle " << a;
  }
}

TEST(Rotate, PreservesShapeAndRange) {
  const auto img = random_image(11, 7, 4);
  const auto r = rotate(img, 1.234);
  EXPECT_EQ(r.height, 11u);
  EXPECT_EQ(r.width, 7u);
  EXPECT_TRUE(in_unit_range(r));
}

TEST(Adjust, UnitFactorsAreIdentity) {
  const auto img = random_image(5, 6, 5);
  EXPECT_EQ(adjust(img, 1.0, 1.0), img);
}

TEST(Adjust, ConstantImageUnchangedByContrast) {
  const Image img(4, 4, 0.3f);
  for (double c : {0.85, 1.0, 1.15, 3.0}) {
    const auto out = adjust(img, 1.0, c);
    for (float v : out.data) EXPECT_NEAR(v, 0.3f, 1e-7);
  }
}

TEST(Adjust, BrightnessScalesAtMean) {
  const Image img(2, 2, 0.5f);
  const auto out = adjust(img, 1.15, 1.1);
  for (float v : out.data) EXPECT_NEAR(v, 0.575f, 1e-6);
}

TEST(Adjust, MatchesPerPixelFormula) {
  const auto img = random_image(6, 5, 6);
  const double m = img.mean();
  const auto out = adjust(img, 1.1, 0.9);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double want = std::clamp(((img.data[i] - m) * 0.9 + m) * 1.1, 0.0, 1.0);
    EXPECT_NEAR(out.data[i], want, 1e-6);
  }
}

TEST(Adjust, OutputClipped) {
  const auto out = adjust(random_image(8, 8, 7), 3.0, 4.0);
  EXPECT_TRUE(in_unit_range(out));
}

TEST(Adjust, NonPositiveFactorThrows) {
  const Image img(2, 2, 0.5f);
  EXPECT_THROW(adjust(img, 0.0, 1.0), Error);
  EXPECT_THROW(adjust(img, 1.0, -0.5), Error);
  EXPECT_THROW(adjust(img, NAN, 1.0), Error);
}

TEST(Resize, CheckerboardToSinglePixelAverages) {
  Image img(2, 2);
  for (std::size_t c = 0; c < Image::channels; ++c) {
    img.at(0, 0, c) = 1.0f;
    img.at(1, 1, c) = 1.0f;
  }
  const auto out = resize(img, 1, 1);
  for (float v : out.data) EXPECT_NEAR(v, 0.5f, 1e-7);
}

TEST(Resize, ConstantStaysConstant) {
  const Image img(10, 14, 0.42f);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{3, 5}, {10, 14}, {31, 2}}) {
    const auto out = resize(img, h, w);
    EXPECT_EQ(out.height, h);
    EXPECT_EQ(out.width, w);
    for (float v : out.data) EXPECT_NEAR(v, 0.42f, 1e-6);
  }
}

TEST(Resize, SameSizeIsIdentity) {
  const auto img = random_image(7, 9, 8);
  EXPECT_EQ(resize(img, 7, 9), img);
}

TEST(Resize, ZeroDimensionThrows) {
  const Image img(2, 2);
  EXPECT_THROW(resize(img, 0, 2), Error);
  EXPECT_THROW(resize(img, 2, 0), Error);
}

TEST(SampleTransforms, CountOneIsIdentity) {
  const auto t = sample_transforms(99, 1);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0], (TransformSpec{0.0, 1.0, 1.0}));
}

TEST(SampleTransforms, SameSeedSameList) {
  EXPECT_EQ(sample_transforms(5, 16), sample_transforms(5, 16));
  EXPECT_NE(sample_transforms(5, 16), sample_transforms(6, 16));
}

TEST(SampleTransforms, DrawsStayInRanges) {
  const auto t = sample_transforms(7, 1000);
  ASSERT_EQ(t.size(), 1000u);
  for (const auto& s : t) {
    EXPECT_GE(s.angle, 0.0);
    EXPECT_LT(s.angle, 2 * kPi);
    EXPECT_GE(s.brightness, 0.85);
    EXPECT_LE(s.brightness, 1.15);
    EXPECT_GE(s.contrast, 0.85);
    EXPECT_LE(s.contrast, 1.15);
  }
}

TEST(SampleTransforms, FactorsCanBeDisabled) {
  TransformSampling cfg;
  cfg.factors = false;
  for (const auto& s : sample_transforms(8, 50, cfg)) {
    EXPECT_EQ(s.brightness, 1.0);
    EXPECT_EQ(s.contrast, 1.0);
  }
}

TEST(SampleTransforms, ZeroCountThrows) {
  EXPECT_THROW(sample_transforms(1, 0), Error);
}

TEST(ApplyTransform, RotatesThenAdjusts) {
  const auto img = random_image(12, 12, 9);
  const TransformSpec t{0.7, 1.1, 0.9};
  EXPECT_EQ(apply_transform(img, t), adjust(rotate(img, 0.7), 1.1, 0.9));
}

TEST(ToChw, ReordersChannels) {
  Image img(2, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i) / 20;
  const auto t = to_chw<double>(img);
  ASSERT_EQ(t.shape(), (Shape{3, 2, 3}));
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < 2; ++y) {
      for (std::size_t x = 0; x < 3; ++x) {
        EXPECT_EQ(t[(c * 2 + y) * 3 + x], static_cast<double>(img.at(y, x, c)));
      }
    }
  }
}

TEST(Png, RoundTripOfByteValuesIsExact) {
  TempDir dir;
  Image img(5, 7);
  std::mt19937_64 rng(10);
  for (auto& v : img.data) v = static_cast<float>(rng() % 256) / 255.0f;
  const auto path = (dir.path() / "a.png").string();
  save_png(path, img);
  EXPECT_EQ(load_png(path), img);
}

TEST(Png, GrayscaleIsReplicated) {
  TempDir dir;
  const auto path = (dir.path() / "g.png").string();
  save_png_gray(path, 2, 2, {0, 51, 102, 255});
  const auto img = load_png(path);
  ASSERT_EQ(img.height, 2u);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(img.at(0, 1, c), 51 / 255.0f);
    EXPECT_EQ(img.at(1, 1, c), 1.0f);
  }
}

TEST(Png, MissingOrCorruptFileThrows) {
  TempDir dir;
  EXPECT_THROW(load_png((dir.path() / "missing.png").string()), FormatError);
  const auto bad = dir.path() / "bad.png";
  std::ofstream(bad) << "not a png";
  EXPECT_THROW(load_png(bad.string()), FormatError);
}

TEST(Dataset, ListsTrainAndTestCategories) {
  TempDir dir;
  const auto root = dir.path();
  const Image img(2, 2, 0.5f);
  for (const char* rel : {"train/good/b.png", "train/good/a.png", "test/good/x.png",
                          "test/crack/y.png", "test/blob/z.png"}) {
    std::filesystem::create_directories((root / rel).parent_path());
    save_png((root / rel).string(), img);
  }
  std::ofstream(root / "train/good/notes.txt") << "ignored";

  const auto train = list_train(root.string());
  ASSERT_EQ(train.size(), 2u);
  EXPECT_EQ(train[0].sample_id, "good/a.png");
  EXPECT_EQ(train[1].sample_id, "good/b.png");

  const auto test = list_test(root.string());
  ASSERT_EQ(test.size(), 3u);
  EXPECT_EQ(test[0].sample_id, "blob/z.png");
  EXPECT_EQ(test[0].label, 1);
  EXPECT_EQ(test[1].sample_id, "crack/y.png");
  EXPECT_EQ(test[2].sample_id, "good/x.png");
  EXPECT_EQ(test[2].label, 0);
}

TEST(Dataset, FlatFolderIsUnlabeled) {
  TempDir dir;
  save_png((dir.path() / "q.png").string(), Image(1, 1));
  const auto test = list_test(dir.path().string());
  ASSERT_EQ(test.size(), 1u);
  EXPECT_EQ(test[0].label, -1);
  EXPECT_EQ(test[0].sample_id, "q.png");
  EXPECT_TRUE(list_train(dir.path().string()).empty());
}
