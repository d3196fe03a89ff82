#pragma once

// Seeded synthetic datasets for self-contained testing:
//   gaussian  N(0, I) normals, N(shift * 1, I) anomalies
//   mixture   1/2 N(+3 e1, I) + 1/2 N(-3 e1, I) normals, N(0, I) anomalies
//   texture   smooth value-noise images; anomalies carry a bright square

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "differflow/image.hpp"
#include "differflow/random.hpp"
#include "differflow/tensor.hpp"

namespace differflow::synth {

inline Tensor<float> gaussian(std::size_t n, std::size_t dim, double shift, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<float> out(Shape{n, dim});
  for (auto& v : out.values()) v = static_cast<float>(normal(rng) + shift);
  return out;
}

inline Tensor<float> mixture(std::size_t n, std::size_t dim, double offset, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  Tensor<float> out(Shape{n, dim});
  for (std::size_t i = 0; i < n; ++i) {
    const double centre = coin(rng) ? offset : -offset;
    for (std::size_t j = 0; j < dim; ++j) {
      out[i * dim + j] = static_cast<float>(normal(rng) + (j == 0 ? centre : 0.0));
    }
  }
  return out;
}

// Half-open pixel rectangle [y0, y1) x [x0, x1).
struct Box {
  std::size_t y0 = 0;
  std::size_t x0 = 0;
  std::size_t y1 = 0;
  std::size_t x1 = 0;

  bool contains(std::size_t y, std::size_t x) const {
    return y >= y0 && y < y1 && x >= x0 && x < x1;
  }
};

// Grayscale value noise: three octaves of smoothstep-interpolated random
// lattices (cell sizes size/4, size/8, size/16), mean 0.5.
inline Image texture(std::size_t size, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> acc(size * size, 0.0);
  double amplitude = 1.0;
  for (std::size_t cells : {std::size_t{4}, std::size_t{8}, std::size_t{16}}) {
    const std::size_t n = cells + 1;
    std::vector<double> lattice(n * n);
    for (auto& v : lattice) v = u(rng);
    const double step = static_cast<double>(size) / static_cast<double>(cells);
    for (std::size_t y = 0; y < size; ++y) {
      const double gy = static_cast<double>(y) / step;
      const auto iy = std::min(static_cast<std::size_t>(gy), cells - 1);
      double fy = gy - static_cast<double>(iy);
      fy = fy * fy * (3 - 2 * fy);
      for (std::size_t x = 0; x < size; ++x) {
        const double gx = static_cast<double>(x) / step;
        const auto ix = std::min(static_cast<std::size_t>(gx), cells - 1);
        double fx = gx - static_cast<double>(ix);
        fx = fx * fx * (3 - 2 * fx);
        const double top = lattice[iy * n + ix] * (1 - fx) + lattice[iy * n + ix + 1] * fx;
        const double bot =
            lattice[(iy + 1) * n + ix] * (1 - fx) + lattice[(iy + 1) * n + ix + 1] * fx;
        acc[y * size + x] += amplitude * (top * (1 - fy) + bot * fy);
      }
    }
    amplitude *= 0.5;
  }
  Image img(size, size);
  for (std::size_t i = 0; i < acc.size(); ++i) {
    const auto v = static_cast<float>(std::clamp(0.5 + 0.15 * acc[i], 0.0, 1.0));
    for (std::size_t c = 0; c < Image::channels; ++c) img.data[i * Image::channels + c] = v;
  }
  return img;
}

// Brightens a random square (side size/8 .. size/6) kept size/8 away from
// the border. Returns its bounding box.
inline Box add_blemish(Image& img, Rng& rng, double boost = 0.35) {
  const std::size_t size = std::min(img.height, img.width);
  const std::size_t margin = size / 8;
  std::uniform_int_distribution<std::size_t> side_dist(size / 8, size / 6);
  const std::size_t side = side_dist(rng);
  std::uniform_int_distribution<std::size_t> pos(margin, size - margin - side);
  Box box;
  box.y0 = pos(rng);
  box.x0 = pos(rng);
  box.y1 = box.y0 + side;
  box.x1 = box.x0 + side;
  for (std::size_t y = box.y0; y < box.y1; ++y) {
    for (std::size_t x = box.x0; x < box.x1; ++x) {
      for (std::size_t c = 0; c < Image::channels; ++c) {
        img.at(y, x, c) = static_cast<float>(std::min(1.0, img.at(y, x, c) + boost));
      }
    }
  }
  return box;
}

struct TextureSet {
  std::vector<Image> train;
  std::vector<Image> test;
  std::vector<int> test_labels;
  std::vector<Box> boxes;  // one per test image; empty box for clean ones
};

inline TextureSet texture_set(std::size_t n_train, std::size_t n_clean,
                              std::size_t n_blemished, std::size_t size, Rng& rng) {
  TextureSet set;
  for (std::size_t i = 0; i < n_train; ++i) set.train.push_back(texture(size, rng));
  for (std::size_t i = 0; i < n_clean; ++i) {
    set.test.push_back(texture(size, rng));
    set.test_labels.push_back(0);
    set.boxes.push_back({});
  }
  for (std::size_t i = 0; i < n_blemished; ++i) {
    Image img = texture(size, rng);
    set.boxes.push_back(add_blemish(img, rng));
    set.test.push_back(std::move(img));
    set.test_labels.push_back(1);
  }
  return set;
}

}  // namespace differflow::synth
