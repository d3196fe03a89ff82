// differflow: train, score, evaluate, localize and generate synthetic data.
// Exit codes: 0 success, 2 usage or data error, 3 numerical divergence.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "differflow/differflow.hpp"
#include "differflow/png.hpp"

namespace fs = std::filesystem;
using namespace differflow;

namespace {

constexpr int kExitData = 2;
constexpr int kExitDiverged = 3;

// --config plus one flag per config key, applied on top of the file.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  CLI::App* app = nullptr;

  void attach(CLI::App* sub) {
    app = sub;
    sub->add_option("--config", config_path, "key=value run configuration file")
        ->check(CLI::ExistingFile);
    for (const auto& k : config_keys()) {
      sub->add_option("--" + k.name, values[k.name], k.help + " (default " + k.get({}) + ")");
    }
  }

  RunConfig resolve() const {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    for (const auto& k : config_keys()) {
      if (app->count("--" + k.name) > 0) {
        try {
          k.set(cfg, values.at(k.name));
        } catch (const FormatError& e) {
          throw ConfigError(std::string("--") + k.name + ": " + e.what());
        }
      }
    }
    validate(cfg);
    return cfg;
  }
};

bool is_feature_file(const std::string& path) {
  return fs::path(path).extension() == ".dff";
}

Tensor<float> feature_matrix(const FeatureFile& file) {
  Tensor<float> x(Shape{file.records.size(), file.dim});
  for (std::size_t r = 0; r < file.records.size(); ++r) {
    std::copy(file.records[r].values.begin(), file.records[r].values.end(),
              x.values().begin() + r * file.dim);
  }
  return x;
}

Extractor<float> make_extractor(const RunConfig& cfg) {
  if (cfg.extractor == "toy") {
    return toy_extractor(derive_seed(cfg.train.seed, SeedStream::Extractor), cfg.toy_channels);
  }
  return load_extractor(cfg.extractor);
}

std::vector<Image> load_images(const std::vector<DatasetEntry>& entries) {
  std::vector<Image> out(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) { out[i] = load_png(entries[i].path); });
  return out;
}

int cmd_train(const std::string& data, const std::string& out, std::string loss_log,
              const RunConfig& cfg) {
  if (loss_log.empty()) loss_log = out + ".loss.csv";
  std::ofstream log(loss_log, std::ios::binary);
  if (!log) throw Error("cannot write loss log '" + loss_log + "'");
  auto on_epoch = [&](std::size_t epoch, double mean) {
    log << epoch << ',' << format_double(mean) << '\n';
  };

  AnomalyModel<float> model;
  std::vector<double> history;
  std::optional<double> holdout;
  if (is_feature_file(data)) {
    const auto file = read_features(data);
    if (file.records.empty()) throw Error("feature file '" + data + "' has no records");
    auto r = train(feature_matrix(file), cfg.train, on_epoch);
    model.flow = std::move(r.model);
    model.scales = cfg.scales;
    model.sampling = cfg.sampling;
    history = std::move(r.loss_history);
    holdout = r.holdout_nll;
  } else {
    const auto entries = list_train(data);
    if (entries.empty()) {
      throw Error("no training images under '" + data + "/train/good'");
    }
    auto r = train_on_images(load_images(entries), make_extractor(cfg), cfg.image_options(),
                             on_epoch);
    model = std::move(r.model);
    history = std::move(r.loss_history);
    holdout = r.holdout_nll;
  }
  save_model(out, model);
  std::cout << "epochs=" << history.size();
  if (!history.empty()) {
    std::cout << " first_nll=" << format_double(history.front())
              << " final_nll=" << format_double(history.back());
  }
  if (holdout) std::cout << " holdout_nll=" << format_double(*holdout);
  std::cout << "\nmodel=" << out << "\n";
  return 0;
}

int cmd_score(const std::string& model_path, const std::string& data, const std::string& out,
              const RunConfig& cfg) {
  const auto model = load_model(model_path);
  std::vector<ScoreReport> reports;
  if (is_feature_file(data)) {
    reports = score_feature_records(read_features(data), model.flow, cfg.test_transform_count);
  } else {
    model.require_extractor();
    const auto entries = list_test(data);
    if (entries.empty()) throw Error("no test images under '" + data + "'");
    const auto images = load_images(entries);
    const auto transforms =
        sample_transforms(derive_seed(cfg.train.seed, SeedStream::TestTransforms),
                          cfg.test_transform_count, model.sampling);
    reports.resize(entries.size());
    parallel_for(entries.size(), [&](std::size_t i) {
      reports[i] = anomaly_score(images[i], model, transforms);
      reports[i].sample_id = entries[i].sample_id;
      reports[i].label = entries[i].label;
    });
  }
  if (reports.empty()) throw Error("no samples to score in '" + data + "'");
  write_scores(out, reports);
  std::cout << "scored=" << reports.size() << " transforms=" << cfg.test_transform_count
            << "\nscores=" << out << "\n";
  return 0;
}

int cmd_eval(const std::string& scores, const std::string& out, std::size_t bins,
             double clip_max) {
  const auto reports = read_scores(scores);
  const auto rep = write_eval_report(reports, out, bins, clip_max);
  std::cout << "auroc=" << format_double(rep.roc.auroc) << "\n";
  return 0;
}

int cmd_localize(const std::string& model_path, const std::string& image,
                 const std::string& out, const RunConfig& cfg) {
  const auto model = load_model(model_path);
  model.require_extractor();
  const Image img = load_png(image);
  const double sigma = cfg.blur_sigma < 0 ? default_blur_sigma(img.width) : cfg.blur_sigma;
  const auto map = localize(img, model, default_rotations(cfg.rotations), sigma);
  const double max = map.max_value();
  std::vector<std::uint8_t> pixels(map.values.size(), 0);
  if (max > 0) {
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = to_byte(map.values[i] / max);
  }
  save_png_gray(out, map.height, map.width, pixels);
  const std::string sidecar = out + ".txt";
  std::ofstream side(sidecar, std::ios::binary);
  if (!side) throw Error("cannot write '" + sidecar + "'");
  const std::size_t a = map.argmax();
  side << "max=" << format_double(max) << "\n";
  side << "argmax_y=" << a / map.width << "\nargmax_x=" << a % map.width << "\n";
  std::cout << "max=" << format_double(max) << "\nmap=" << out << "\n";
  return 0;
}

struct SynthOptions {
  std::string kind;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t dim = 0;  // 0: 16 for gaussian, 8 for mixture
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  double shift = 1.0;
  double offset = 3.0;
  std::size_t size = 64;
};

std::string numbered(std::size_t i, int width) {
  std::string s = std::to_string(i);
  return std::string(s.size() < static_cast<std::size_t>(width) ? width - s.size() : 0, '0') + s;
}

void append_records(FeatureFile& file, const Tensor<float>& x, const std::string& prefix,
                    std::int8_t label) {
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    FeatureRecord rec;
    rec.sample_id = prefix + numbered(r, 6);
    rec.label = label;
    rec.values.assign(x.values().begin() + r * x.dim(1), x.values().begin() + (r + 1) * x.dim(1));
    file.records.push_back(std::move(rec));
  }
}

int cmd_synth(SynthOptions o) {
  Rng rng(derive_seed(o.seed, SeedStream::Synth));
  fs::create_directories(o.out);
  const fs::path root(o.out);
  if (o.kind == "texture") {
    if (o.n_train == 0) o.n_train = 64;
    if (o.n_test == 0) o.n_test = 32;
    if (o.size < 16) throw Error("texture size must be at least 16");
    const auto set = synth::texture_set(o.n_train, o.n_test, o.n_test, o.size, rng);
    fs::create_directories(root / "train" / "good");
    fs::create_directories(root / "test" / "good");
    fs::create_directories(root / "test" / "blemish");
    for (std::size_t i = 0; i < set.train.size(); ++i) {
      save_png((root / "train" / "good" / (numbered(i, 3) + ".png")).string(), set.train[i]);
    }
    std::ofstream boxes(root / "boxes.csv", std::ios::binary);
    for (std::size_t i = 0; i < set.test.size(); ++i) {
      const bool bad = set.test_labels[i] == 1;
      const std::size_t k = bad ? i - o.n_test : i;
      const std::string cat = bad ? "blemish" : "good";
      const std::string name = numbered(k, 3) + ".png";
      save_png((root / "test" / cat / name).string(), set.test[i]);
      if (bad) {
        const auto& b = set.boxes[i];
        boxes << cat << '/' << name << ',' << b.y0 << ',' << b.x0 << ',' << b.y1 << ','
              << b.x1 << '\n';
      }
    }
    std::cout << "train=" << set.train.size() << " test=" << set.test.size() << "\n";
    return 0;
  }
  if (o.kind != "gaussian" && o.kind != "mixture") {
    throw Error("unknown synth kind '" + o.kind + "' (gaussian, mixture, texture)");
  }
  const bool gauss = o.kind == "gaussian";
  if (o.dim == 0) o.dim = gauss ? 16 : 8;
  if (o.n_train == 0) o.n_train = 2000;
  if (o.n_test == 0) o.n_test = 500;
  auto normals = [&](std::size_t n) {
    return gauss ? synth::gaussian(n, o.dim, 0.0, rng) : synth::mixture(n, o.dim, o.offset, rng);
  };
  FeatureFile train_file{static_cast<std::uint32_t>(o.dim), {}};
  append_records(train_file, normals(o.n_train), "train/", 0);
  FeatureFile test_file{static_cast<std::uint32_t>(o.dim), {}};
  append_records(test_file, normals(o.n_test), "normal/", 0);
  append_records(test_file, synth::gaussian(o.n_test, o.dim, gauss ? o.shift : 0.0, rng),
                 "anomaly/", 1);
  write_features((root / "train.dff").string(), train_file);
  write_features((root / "test.dff").string(), test_file);
  std::cout << "train=" << train_file.records.size() << " test=" << test_file.records.size()
            << " dim=" << o.dim << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Normalizing-flow defect detection"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "differflow 1.0");

  auto* train = app.add_subcommand("train", "train a flow on images or a feature file");
  std::string train_data, train_out, loss_log;
  train->add_option("--data", train_data, "dataset root (train/good/*.png) or .dff file")
      ->required();
  train->add_option("--out", train_out, "output model file")->required();
  train->add_option("--loss-log", loss_log, "epoch,mean_nll log (default <out>.loss.csv)");
  ConfigFlags train_cfg;
  train_cfg.attach(train);

  auto* score = app.add_subcommand("score", "score test images or feature records");
  std::string score_model, score_data, score_out;
  score->add_option("--model", score_model, "model file")->required();
  score->add_option("--data", score_data, "dataset root, image folder or .dff file")
      ->required();
  score->add_option("--out", score_out, "output score file")->required();
  ConfigFlags score_cfg;
  score_cfg.attach(score);
  std::size_t transforms = 0;
  score->add_option("--transforms", transforms, "alias of --test_transform_count");

  auto* eval = app.add_subcommand("eval", "ROC, AUROC and histogram of a score file");
  std::string eval_scores, eval_out;
  std::size_t bins = 20;
  double clip_max = -1;
  eval->add_option("--scores", eval_scores, "score file")->required();
  eval->add_option("--out", eval_out, "report directory")->required();
  eval->add_option("--bins", bins, "histogram bins")->capture_default_str();
  eval->add_option("--clip-max", clip_max, "histogram overflow bound (default: max score)");

  auto* loc = app.add_subcommand("localize", "gradient map of one image");
  std::string loc_model, loc_image, loc_out;
  loc->add_option("--model", loc_model, "image-mode model file")->required();
  loc->add_option("--image", loc_image, "PNG image")->required();
  loc->add_option("--out", loc_out, "output map PNG (max in <out>.txt)")->required();
  ConfigFlags loc_cfg;
  loc_cfg.attach(loc);

  auto* syn = app.add_subcommand("synth", "generate a synthetic dataset");
  SynthOptions so;
  syn->add_option("--kind", so.kind, "gaussian | mixture | texture")
      ->required()
      ->check(CLI::IsMember({"gaussian", "mixture", "texture"}));
  syn->add_option("--out", so.out, "output directory")->required();
  syn->add_option("--seed", so.seed, "random seed")->capture_default_str();
  syn->add_option("--dim", so.dim, "feature dimension (default 16 gaussian, 8 mixture)");
  syn->add_option("--n-train", so.n_train, "training samples (default 2000, texture 64)");
  syn->add_option("--n-test", so.n_test,
                  "test samples per class (default 500, texture 32)");
  syn->add_option("--shift", so.shift, "gaussian anomaly mean")->capture_default_str();
  syn->add_option("--offset", so.offset, "mixture mode offset")->capture_default_str();
  syn->add_option("--size", so.size, "texture image size")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitData;
  }

  try {
    if (*train) return cmd_train(train_data, train_out, loss_log, train_cfg.resolve());
    if (*score) {
      RunConfig cfg = score_cfg.resolve();
      if (score->count("--transforms") > 0) {
        if (transforms == 0) throw ConfigError("--transforms must be at least 1");
        cfg.test_transform_count = transforms;
      }
      return cmd_score(score_model, score_data, score_out, cfg);
    }
    if (*eval) return cmd_eval(eval_scores, eval_out, bins, clip_max);
    if (*loc) return cmd_localize(loc_model, loc_image, loc_out, loc_cfg.resolve());
    if (*syn) return cmd_synth(so);
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitData;
}
