#pragma once

// ROC / AUROC over anomaly scores and score histograms.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "differflow/tensor.hpp"

namespace differflow {

struct RocPoint {
  double fpr = 0;
  double tpr = 0;
  double threshold = 0;  // decision is score >= threshold
};

struct RocCurve {
  std::vector<RocPoint> points;  // starts at (0,0), ends at (1,1)
  double auroc = 0;
};

namespace detail {

inline std::pair<std::size_t, std::size_t> class_counts(std::span<const double> scores,
                                                        std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw Error("scores and labels differ in length (" + std::to_string(scores.size()) +
                " vs " + std::to_string(labels.size()) + ")");
  }
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      ++pos;
    } else if (labels[i] == 0) {
      ++neg;
    } else {
      throw Error("label " + std::to_string(labels[i]) + " at index " +
                  std::to_string(i) + " is not 0 or 1");
    }
    if (!std::isfinite(scores[i])) {
      throw NumericalError("non-finite score at index " + std::to_string(i));
    }
  }
  if (pos == 0 || neg == 0) {
    throw Error("AUROC needs both normal and anomalous samples");
  }
  return {pos, neg};
}

}  // namespace detail

// Sweeps every distinct score from high to low with the decision
// score >= threshold. Ties between classes move diagonally, which gives
// them half credit in the trapezoidal area.
inline RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels) {
  const auto [pos, neg] = detail::class_counts(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  RocCurve curve;
  curve.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double thr = scores[order[i]];
    while (i < order.size() && scores[order[i]] == thr) {
      (labels[order[i]] == 1 ? tp : fp) += 1;
      ++i;
    }
    curve.points.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                            static_cast<double>(tp) / static_cast<double>(pos), thr});
  }
  double area = 0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2;
  }
  curve.auroc = area;
  return curve;
}

// Probability that a random anomalous sample scores above a random normal
// one, ties counting one half.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  return roc_curve(scores, labels).auroc;
}

struct Histogram {
  double lo = 0;
  double hi = 0;
  std::vector<std::size_t> counts;

  double bin_width() const { return (hi - lo) / static_cast<double>(counts.size()); }
};

// Uniform bins over [min(scores), clip_max]; scores above clip_max land in
// the last bin.
inline Histogram histogram(std::span<const double> scores, std::size_t bins,
                           double clip_max) {
  if (bins < 1) throw Error("histogram needs at least one bin");
  Histogram h;
  h.counts.assign(bins, 0);
  if (scores.empty()) {
    h.lo = h.hi = 0;
    return h;
  }
  h.lo = *std::min_element(scores.begin(), scores.end());
  h.hi = std::max(clip_max, h.lo);
  const double width = h.hi - h.lo;
  for (double s : scores) {
    std::size_t bin = bins - 1;
    if (s < h.hi && width > 0) {
      bin = std::min(bins - 1, static_cast<std::size_t>((s - h.lo) / width *
                                                        static_cast<double>(bins)));
    }
    ++h.counts[bin];
  }
  return h;
}

}  // namespace differflow
