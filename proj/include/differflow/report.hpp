#pragma once

// Text outputs: score files (`sample_id,score,label` per line) and the
// evaluation report directory (auroc.txt, roc.csv, hist.csv).

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "differflow/detect.hpp"
#include "differflow/metrics.hpp"
#include "differflow/model_io.hpp"

namespace differflow {

inline void write_scores(std::ostream& out, const std::vector<ScoreReport>& reports) {
  for (const auto& r : reports) {
    out << r.sample_id << ',' << format_double(r.score) << ',' << r.label << '\n';
  }
}

inline void write_scores(const std::string& path, const std::vector<ScoreReport>& reports) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  write_scores(out, reports);
}

// Sample ids may contain commas; score and label are the last two fields.
inline std::vector<ScoreReport> parse_scores(std::istream& in) {
  std::vector<ScoreReport> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c2 = line.rfind(',');
    const auto c1 = c2 == std::string::npos || c2 == 0 ? std::string::npos
                                                        : line.rfind(',', c2 - 1);
    if (c1 == std::string::npos) {
      throw FormatError("score line " + std::to_string(lineno) +
                        ": expected sample_id,score,label");
    }
    ScoreReport r;
    r.sample_id = line.substr(0, c1);
    const std::string where = "score line " + std::to_string(lineno);
    r.score = parse_number<double>(std::string_view(line).substr(c1 + 1, c2 - c1 - 1), where);
    r.label = parse_number<int>(std::string_view(line).substr(c2 + 1), where);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<ScoreReport> read_scores(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read score file '" + path + "'");
  return parse_scores(in);
}

struct EvalReport {
  RocCurve roc;
  Histogram hist;
};

// Computes the ROC curve and histogram and writes auroc.txt, roc.csv and
// hist.csv into `dir`. clip_max < 0 means no clipping.
inline EvalReport write_eval_report(const std::vector<ScoreReport>& reports,
                                    const std::string& dir, std::size_t bins,
                                    double clip_max) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& r : reports) {
    scores.push_back(r.score);
    labels.push_back(r.label);
  }
  EvalReport rep;
  rep.roc = roc_curve(scores, labels);
  if (clip_max < 0) clip_max = *std::max_element(scores.begin(), scores.end());
  rep.hist = histogram(scores, bins, clip_max);

  std::filesystem::create_directories(dir);
  const std::filesystem::path root(dir);
  auto open = [&](const char* name) {
    std::ofstream out(root / name, std::ios::binary);
    if (!out) throw Error("cannot write '" + (root / name).string() + "'");
    return out;
  };
  {
    auto out = open("auroc.txt");
    out << "auroc=" << format_double(rep.roc.auroc) << '\n';
  }
  {
    auto out = open("roc.csv");
    for (const auto& p : rep.roc.points) {
      out << format_double(p.fpr) << ',' << format_double(p.tpr) << '\n';
    }
  }
  {
    auto out = open("hist.csv");
    const double w = rep.hist.bin_width();
    for (std::size_t b = 0; b < rep.hist.counts.size(); ++b) {
      out << format_double(rep.hist.lo + w * static_cast<double>(b)) << ','
          << format_double(rep.hist.lo + w * static_cast<double>(b + 1)) << ','
          << rep.hist.counts[b] << '\n';
    }
  }
  return rep;
}

}  // namespace differflow
