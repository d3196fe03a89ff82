#pragma once

// AnomalyModel <-> TensorFile. A model file is self-describing: flow
// hyperparameters, permutations, extractor layer chain, normalization and
// scales travel in the metadata block next to the weights.

#include <charconv>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "differflow/detect.hpp"
#include "differflow/extractor.hpp"
#include "differflow/flow.hpp"
#include "differflow/store.hpp"

namespace differflow {

inline constexpr std::string_view kModelFormat = "differflow-model";

// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename N>
N parse_number(std::string_view text, std::string_view what) {
  N v{};
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last) {
    throw FormatError("invalid value '" + std::string(text) + "' for " + std::string(what));
  }
  return v;
}

template <typename N>
std::vector<N> parse_list(std::string_view text, std::string_view what) {
  std::vector<N> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find(',', start), text.size());
    out.push_back(parse_number<N>(text.substr(start, end - start), what));
    start = end + 1;
  }
  return out;
}

template <typename N>
std::string join_list(const std::vector<N>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<N>) {
      out += format_double(v[i]);
    } else {
      out += std::to_string(v[i]);
    }
  }
  return out;
}

inline void put_extractor(TensorFile& file, const Extractor<float>& ex) {
  ex.validate();
  file.set_meta("extractor.layers", ex.spec.to_string());
  file.set_meta("extractor.mean", join_list(std::vector<double>(ex.mean.begin(), ex.mean.end())));
  file.set_meta("extractor.std", join_list(std::vector<double>(ex.stddev.begin(), ex.stddev.end())));
  for (std::size_t k = 0; k < ex.weights.size(); ++k) {
    file.tensors.push_back({Extractor<float>::weight_name(k), ex.weights[k]});
    file.tensors.push_back({Extractor<float>::bias_name(k), ex.biases[k]});
  }
}

// Reads an extractor from a tensor file (a model file or an exporter
// weight file).
inline Extractor<float> get_extractor(const TensorFile& file) {
  Extractor<float> ex;
  ex.spec = ConvNetSpec::parse(file.require_meta("extractor.layers"));
  const auto mean = parse_list<double>(file.require_meta("extractor.mean"), "extractor.mean");
  const auto sd = parse_list<double>(file.require_meta("extractor.std"), "extractor.std");
  if (mean.size() != 3 || sd.size() != 3) {
    throw FormatError("extractor normalization needs 3 channels");
  }
  std::copy(mean.begin(), mean.end(), ex.mean.begin());
  std::copy(sd.begin(), sd.end(), ex.stddev.begin());
  for (std::size_t k = 0; k < ex.spec.conv_count(); ++k) {
    ex.weights.push_back(file.require(Extractor<float>::weight_name(k)));
    ex.biases.push_back(file.require(Extractor<float>::bias_name(k)));
  }
  ex.validate();
  return ex;
}

inline Extractor<float> load_extractor(const std::string& path) {
  return get_extractor(read_tensors(path));
}

inline TensorFile model_to_file(
    const AnomalyModel<float>& model,
    const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  TensorFile file;
  const auto& fc = model.flow.config;
  file.set_meta("format", std::string(kModelFormat));
  file.set_meta("source", model.extractor ? "images" : "features");
  file.set_meta("flow.dim", std::to_string(fc.dim));
  file.set_meta("flow.blocks", std::to_string(fc.blocks));
  file.set_meta("flow.hidden_width", std::to_string(fc.hidden_width));
  file.set_meta("flow.hidden_layers", std::to_string(fc.hidden_layers));
  file.set_meta("flow.clamp_alpha", format_double(fc.clamp_alpha));
  file.set_meta("flow.seed", std::to_string(fc.seed));
  for (std::size_t b = 0; b < model.flow.blocks.size(); ++b) {
    file.set_meta("flow.block" + std::to_string(b) + ".permutation",
                  join_list(model.flow.blocks[b].permutation));
  }
  file.set_meta("scales", join_list(model.scales.scales));
  file.set_meta("multi_scale", model.scales.multi_scale ? "1" : "0");
  file.set_meta("transform_factors", model.sampling.factors ? "1" : "0");
  file.set_meta("factor_min", format_double(model.sampling.factor_min));
  file.set_meta("factor_max", format_double(model.sampling.factor_max));
  for (const auto& [k, v] : extra) file.set_meta(k, v);
  for (const auto& [name, t] : model.flow.parameters()) file.tensors.push_back({name, *t});
  if (model.extractor) put_extractor(file, *model.extractor);
  return file;
}

inline AnomalyModel<float> model_from_file(const TensorFile& file) {
  if (file.meta("format") != std::string(kModelFormat)) {
    throw FormatError("not a model file (format key missing or wrong)");
  }
  AnomalyModel<float> model;
  auto& fc = model.flow.config;
  fc.dim = parse_number<std::size_t>(file.require_meta("flow.dim"), "flow.dim");
  fc.blocks = parse_number<std::size_t>(file.require_meta("flow.blocks"), "flow.blocks");
  fc.hidden_width =
      parse_number<std::size_t>(file.require_meta("flow.hidden_width"), "flow.hidden_width");
  fc.hidden_layers =
      parse_number<std::size_t>(file.require_meta("flow.hidden_layers"), "flow.hidden_layers");
  fc.clamp_alpha = parse_number<double>(file.require_meta("flow.clamp_alpha"), "flow.clamp_alpha");
  fc.seed = parse_number<std::uint64_t>(file.require_meta("flow.seed"), "flow.seed");
  if (fc.dim == 0 || fc.dim % 2 != 0) throw FormatError("flow.dim must be even");
  for (std::size_t b = 0; b < fc.blocks; ++b) {
    const std::string key = "flow.block" + std::to_string(b) + ".permutation";
    CouplingBlock<float> blk;
    blk.permutation = parse_list<std::size_t>(file.require_meta(key), key);
    if (blk.permutation.size() != fc.dim) throw FormatError(key + " has wrong length");
    blk.alpha = static_cast<float>(fc.clamp_alpha);
    for (int k = 1; k <= 2; ++k) {
      auto& net = k == 1 ? blk.subnet1 : blk.subnet2;
      for (std::size_t l = 0; l <= fc.hidden_layers; ++l) {
        const auto base = FlowModel<float>::parameter_prefix(b, k, l);
        net.layers.push_back({file.require(base + ".weight"), file.require(base + ".bias")});
      }
    }
    model.flow.blocks.push_back(std::move(blk));
  }
  // Structural check through a forward pass on zeros.
  flow_forward(Tensor<float>(Shape{fc.dim}), model.flow);

  model.scales.scales = parse_list<std::size_t>(file.require_meta("scales"), "scales");
  model.scales.multi_scale = file.require_meta("multi_scale") == "1";
  model.sampling.factors = file.require_meta("transform_factors") == "1";
  model.sampling.factor_min = parse_number<double>(file.require_meta("factor_min"), "factor_min");
  model.sampling.factor_max = parse_number<double>(file.require_meta("factor_max"), "factor_max");
  const std::string source = file.require_meta("source");
  if (source == "images") {
    model.extractor = get_extractor(file);
    if (model.extractor->feature_dim(model.scales) != fc.dim) {
      throw FormatError("extractor feature dimension does not match flow.dim");
    }
  } else if (source != "features") {
    throw FormatError("unknown model source '" + source + "'");
  }
  return model;
}

inline void save_model(const std::string& path, const AnomalyModel<float>& model,
                       const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  write_tensors(path, model_to_file(model, extra));
}

inline AnomalyModel<float> load_model(const std::string& path) {
  return model_from_file(read_tensors(path));
}

}  // namespace differflow
