#pragma once

// Run configuration: a plain-text key=value file whose keys map one-to-one
// onto command-line flags. Blank lines and '#' comments are ignored.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "differflow/detect.hpp"
#include "differflow/model_io.hpp"
#include "differflow/pipeline.hpp"

namespace differflow {

struct ConfigError : Error {
  using Error::Error;
};

struct RunConfig {
  TrainConfig train;
  MultiScaleConfig scales;
  TransformSampling sampling;
  bool train_transforms = true;
  std::size_t test_transform_count = 64;
  // "toy" or a path to a tensor file holding extractor weights.
  std::string extractor = "toy";
  std::size_t toy_channels = 16;
  std::size_t rotations = 8;
  // Negative selects the default width / 64.
  double blur_sigma = -1.0;

  ImageTrainOptions image_options() const {
    return {train, scales, sampling, train_transforms};
  }
};

inline bool parse_bool(std::string_view v, std::string_view key) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("invalid boolean '" + std::string(v) + "' for " + std::string(key));
}

// One entry per config key. `set` parses a textual value, `get` prints the
// current one.
struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  using S = std::string_view;
  static const std::vector<ConfigKey> keys = {
      {"epochs", "training epochs",
       [](RunConfig& c, S v) { c.train.epochs = parse_number<std::size_t>(v, "epochs"); },
       [](const RunConfig& c) { return std::to_string(c.train.epochs); }},
      {"batch_size", "mini-batch size",
       [](RunConfig& c, S v) {
         c.train.batch_size = parse_number<std::size_t>(v, "batch_size");
       },
       [](const RunConfig& c) { return std::to_string(c.train.batch_size); }},
      {"learning_rate", "Adam learning rate",
       [](RunConfig& c, S v) {
         c.train.adam.learning_rate = parse_number<double>(v, "learning_rate");
       },
       [](const RunConfig& c) { return format_double(c.train.adam.learning_rate); }},
      {"beta1", "Adam first-moment decay",
       [](RunConfig& c, S v) { c.train.adam.beta1 = parse_number<double>(v, "beta1"); },
       [](const RunConfig& c) { return format_double(c.train.adam.beta1); }},
      {"beta2", "Adam second-moment decay",
       [](RunConfig& c, S v) { c.train.adam.beta2 = parse_number<double>(v, "beta2"); },
       [](const RunConfig& c) { return format_double(c.train.adam.beta2); }},
      {"eps", "Adam epsilon",
       [](RunConfig& c, S v) { c.train.adam.eps = parse_number<double>(v, "eps"); },
       [](const RunConfig& c) { return format_double(c.train.adam.eps); }},
      {"blocks", "coupling blocks",
       [](RunConfig& c, S v) { c.train.blocks = parse_number<std::size_t>(v, "blocks"); },
       [](const RunConfig& c) { return std::to_string(c.train.blocks); }},
      {"clamp_alpha", "soft-clamp bound alpha",
       [](RunConfig& c, S v) { c.train.clamp_alpha = parse_number<double>(v, "clamp_alpha"); },
       [](const RunConfig& c) { return format_double(c.train.clamp_alpha); }},
      {"subnet_width", "hidden width of the coupling subnets",
       [](RunConfig& c, S v) {
         c.train.subnet_width = parse_number<std::size_t>(v, "subnet_width");
       },
       [](const RunConfig& c) { return std::to_string(c.train.subnet_width); }},
      {"seed", "master random seed",
       [](RunConfig& c, S v) { c.train.seed = parse_number<std::uint64_t>(v, "seed"); },
       [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      {"holdout_fraction", "fraction of training data held out for reporting",
       [](RunConfig& c, S v) {
         c.train.holdout_fraction = parse_number<double>(v, "holdout_fraction");
       },
       [](const RunConfig& c) { return format_double(c.train.holdout_fraction); }},
      {"scales", "comma-separated square input sizes",
       [](RunConfig& c, S v) { c.scales.scales = parse_list<std::size_t>(v, "scales"); },
       [](const RunConfig& c) { return join_list(c.scales.scales); }},
      {"multi_scale", "use all scales (0 keeps only the largest)",
       [](RunConfig& c, S v) { c.scales.multi_scale = parse_bool(v, "multi_scale"); },
       [](const RunConfig& c) { return std::string(c.scales.multi_scale ? "1" : "0"); }},
      {"train_transforms", "resample a random transform per image and epoch",
       [](RunConfig& c, S v) { c.train_transforms = parse_bool(v, "train_transforms"); },
       [](const RunConfig& c) { return std::string(c.train_transforms ? "1" : "0"); }},
      {"test_transform_count", "transforms averaged per test image",
       [](RunConfig& c, S v) {
         c.test_transform_count = parse_number<std::size_t>(v, "test_transform_count");
       },
       [](const RunConfig& c) { return std::to_string(c.test_transform_count); }},
      {"transform_factors", "sample brightness/contrast factors",
       [](RunConfig& c, S v) { c.sampling.factors = parse_bool(v, "transform_factors"); },
       [](const RunConfig& c) { return std::string(c.sampling.factors ? "1" : "0"); }},
      {"factor_min", "lower bound of brightness/contrast factors",
       [](RunConfig& c, S v) { c.sampling.factor_min = parse_number<double>(v, "factor_min"); },
       [](const RunConfig& c) { return format_double(c.sampling.factor_min); }},
      {"factor_max", "upper bound of brightness/contrast factors",
       [](RunConfig& c, S v) { c.sampling.factor_max = parse_number<double>(v, "factor_max"); },
       [](const RunConfig& c) { return format_double(c.sampling.factor_max); }},
      {"extractor", "'toy' or a tensor file with extractor weights",
       [](RunConfig& c, S v) { c.extractor = std::string(v); },
       [](const RunConfig& c) { return c.extractor; }},
      {"toy_channels", "output channels of the toy extractor",
       [](RunConfig& c, S v) {
         c.toy_channels = parse_number<std::size_t>(v, "toy_channels");
       },
       [](const RunConfig& c) { return std::to_string(c.toy_channels); }},
      {"rotations", "rotations averaged during localization",
       [](RunConfig& c, S v) { c.rotations = parse_number<std::size_t>(v, "rotations"); },
       [](const RunConfig& c) { return std::to_string(c.rotations); }},
      {"blur_sigma", "Gaussian blur sigma for gradient maps (negative: width/64)",
       [](RunConfig& c, S v) { c.blur_sigma = parse_number<double>(v, "blur_sigma"); },
       [](const RunConfig& c) { return format_double(c.blur_sigma); }},
  };
  return keys;
}

inline const ConfigKey* find_config_key(std::string_view name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

inline void validate(const RunConfig& c) {
  auto positive = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(c.train.batch_size > 0, "batch_size");
  positive(c.train.adam.learning_rate > 0, "learning_rate");
  positive(c.train.adam.eps > 0, "eps");
  positive(c.train.blocks > 0, "blocks");
  positive(c.train.clamp_alpha > 0, "clamp_alpha");
  positive(c.train.subnet_width > 0, "subnet_width");
  positive(c.test_transform_count > 0, "test_transform_count");
  positive(c.rotations > 0, "rotations");
  positive(c.toy_channels > 0, "toy_channels");
  positive(!c.scales.scales.empty(), "number of scales");
  for (auto s : c.scales.scales) positive(s > 0, "every scale");
  if (!(c.train.adam.beta1 >= 0 && c.train.adam.beta1 < 1) ||
      !(c.train.adam.beta2 >= 0 && c.train.adam.beta2 < 1)) {
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  }
  if (!(c.train.holdout_fraction >= 0 && c.train.holdout_fraction < 1)) {
    throw ConfigError("holdout_fraction must lie in [0, 1)");
  }
  if (!(c.sampling.factor_min > 0 && c.sampling.factor_min <= c.sampling.factor_max)) {
    throw ConfigError("need 0 < factor_min <= factor_max");
  }
}

// Applies `text` on top of `base`. Errors name the offending line.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto* k = find_config_key(key);
    if (!k) throw ConfigError(where + "unknown key '" + key + "'");
    try {
      k->set(base, value);
    } catch (const FormatError& e) {
      throw ConfigError(where + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline std::string format_config(const RunConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + "=" + k.get(c) + "\n";
  return out;
}

}  // namespace differflow
