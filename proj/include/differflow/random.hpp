#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace differflow {

using Rng = std::mt19937_64;

// Every random stream in a run is derived from one user seed by a fixed
// offset, so a single number reproduces the whole pipeline.
enum class SeedStream : std::uint64_t {
  FlowInit = 1,
  Shuffle = 2,
  TrainTransforms = 3,
  TestTransforms = 4,
  Extractor = 5,
  Holdout = 6,
  Synth = 7,
};

inline std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) {
  return seed + static_cast<std::uint64_t>(stream);
}

// Fisher-Yates shuffle of 0..n-1.
inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(p[i - 1], p[pick(rng)]);
  }
  return p;
}

}  // namespace differflow
