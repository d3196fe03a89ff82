#pragma once

// Directory layout shared with MVTec AD:
//   <root>/train/good/*.png
//   <root>/test/good/*.png
//   <root>/test/<defect_type>/*.png

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "differflow/tensor.hpp"

namespace differflow {

struct DatasetEntry {
  std::string path;
  std::string sample_id;  // "<category>/<file name>"
  int label = -1;         // 0 good, 1 defective, -1 unknown
};

namespace detail {

inline std::vector<std::filesystem::path> png_files(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

inline std::vector<DatasetEntry> list_train(const std::string& root) {
  std::vector<DatasetEntry> out;
  for (const auto& p : detail::png_files(std::filesystem::path(root) / "train" / "good")) {
    out.push_back({p.string(), "good/" + p.filename().string(), 0});
  }
  return out;
}

// Test images grouped by category in sorted order; "good" is label 0, any
// other directory label 1. A directory without a test/ subtree is scored as
// a flat unlabeled image folder.
inline std::vector<DatasetEntry> list_test(const std::string& root) {
  namespace fs = std::filesystem;
  std::vector<DatasetEntry> out;
  const fs::path test = fs::path(root) / "test";
  if (!fs::is_directory(test)) {
    for (const auto& p : detail::png_files(root)) {
      out.push_back({p.string(), p.filename().string(), -1});
    }
    return out;
  }
  std::vector<fs::path> cats;
  for (const auto& e : fs::directory_iterator(test)) {
    if (e.is_directory()) cats.push_back(e.path());
  }
  std::sort(cats.begin(), cats.end());
  for (const auto& cat : cats) {
    const std::string name = cat.filename().string();
    for (const auto& p : detail::png_files(cat)) {
      out.push_back({p.string(), name + "/" + p.filename().string(), name == "good" ? 0 : 1});
    }
  }
  return out;
}

}  // namespace differflow
