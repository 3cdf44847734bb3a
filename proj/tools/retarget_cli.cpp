// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: dataset generation, training, retargeting,
// baselines and the mAP-ratio evaluation.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "retarget/baselines.hpp"
#include "retarget/data.hpp"
#include "retarget/eval.hpp"
#include "retarget/networks.hpp"
#include "retarget/pipeline.hpp"
#include "retarget/training.hpp"

namespace {

using namespace retarget;
using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

// ---------------------------------------------------------------------------
// JSON config overlays. Unknown keys are rejected so typos do not silently
// fall back to defaults.

void check_keys(const json& j, const std::vector<std::string>& known, const std::string& section) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown key '" + key + "' in config section '" + section + "'");
    }
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

void overlay(const json& j, data::DatasetConfig& c) {
  check_keys(j, {"count", "size", "min_shapes", "max_shapes", "seed", "noise_cells", "noise_amplitude", "jitter"}, "data");
  read_key(j, "count", c.count);
  read_key(j, "size", c.size);
  read_key(j, "min_shapes", c.min_shapes);
  read_key(j, "max_shapes", c.max_shapes);
  read_key(j, "seed", c.seed);
  read_key(j, "noise_cells", c.noise_cells);
  read_key(j, "noise_amplitude", c.noise_amplitude);
  read_key(j, "jitter", c.jitter);
}

void read_widths(const json& j, nn::ClassifierWidths& w) {
  if (!j.contains("widths")) return;
  const auto v = j.at("widths").get<std::vector<std::size_t>>();
  if (v.size() != 3) throw ConfigError("widths must list three channel counts");
  w = {v[0], v[1], v[2]};
}

void overlay(const json& j, train::PretrainConfig& c) {
  check_keys(j, {"lr", "momentum", "batch", "epochs", "seed", "widths", "cosine"}, "pretrain");
  read_key(j, "lr", c.lr);
  read_key(j, "momentum", c.momentum);
  read_key(j, "batch", c.batch);
  read_key(j, "epochs", c.epochs);
  read_key(j, "seed", c.seed);
  read_key(j, "cosine", c.cosine);
  read_widths(j, c.widths);
}

void overlay(const json& j, train::TrainConfig& c) {
  check_keys(j,
             {"lr", "momentum", "batch", "epochs", "lambda", "gamma", "structure_weight", "ratio_min", "ratio_max",
              "seed", "debug_dir"},
             "train");
  read_key(j, "lr", c.lr);
  read_key(j, "momentum", c.momentum);
  read_key(j, "batch", c.batch);
  read_key(j, "epochs", c.epochs);
  read_key(j, "lambda", c.lambda);
  read_key(j, "gamma", c.gamma);
  read_key(j, "structure_weight", c.structure_weight);
  read_key(j, "ratio_min", c.ratio_min);
  read_key(j, "ratio_max", c.ratio_max);
  read_key(j, "seed", c.seed);
  read_key(j, "debug_dir", c.debug_dir);
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("bad config " + path + ": " + e.what());
  }
  check_keys(j, {"data", "pretrain", "train", "eval"}, "top level");
  return j;
}

json section(const json& config, const char* name) { return config.value(name, json::object()); }

// ---------------------------------------------------------------------------
// Helpers

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("missing checkpoint " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char c;
  while (is.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

nn::Model require_checkpoint(const std::string& path, nn::ModelKind kind) {
  if (!fs::exists(path)) throw ConfigError("missing checkpoint " + path);
  nn::Model m = nn::load_checkpoint(path);
  if (m.kind != kind) throw ConfigError(path + " holds the wrong kind of model");
  return m;
}

std::optional<nn::Model> optional_retargeter(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return require_checkpoint(path, nn::ModelKind::retargeter);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << text;
  if (!os) throw IoError("write failed for " + path);
}

std::unique_ptr<std::ofstream> open_log(const std::string& path) {
  if (path.empty()) return nullptr;
  auto os = std::make_unique<std::ofstream>(path, std::ios::binary);
  if (!*os) throw IoError("cannot write " + path);
  return os;
}

/// Target size from exactly one of --width, --height or --ratio.
struct TargetSize {
  std::size_t width = 0;
  std::size_t height = 0;
};

TargetSize resolve_target(const Tensor& img, std::optional<std::size_t> width, std::optional<std::size_t> height,
                          std::optional<double> ratio) {
  const int given = (width ? 1 : 0) + (height ? 1 : 0) + (ratio ? 1 : 0);
  if (given != 1) throw ConfigError("give exactly one of --width, --height, --ratio");
  TargetSize t{img.dim(3), img.dim(2)};
  if (width) t.width = *width;
  if (height) t.height = *height;
  if (ratio) {
    if (!(*ratio > 0)) throw SpecError("--ratio must be > 0");
    t.width = static_cast<std::size_t>(std::llround(*ratio * static_cast<double>(img.dim(3))));
  }
  if (t.width < 1 || t.height < 1) throw SpecError("target size must be >= 1");
  return t;
}

/// Reduces or enlarges `img` along one axis with the given attention source.
template <typename Source>
Tensor resize_with(const Source& source, const Tensor& img, const TargetSize& t, double lambda, double gamma) {
  const std::size_t h = img.dim(2), w = img.dim(3);
  if (t.width != w) {
    if (t.width < w) return shift::retarget_width(source, img, t.width, lambda);
    return shift::enlarge_width(source, img, static_cast<double>(t.width) / static_cast<double>(w), gamma, lambda);
  }
  if (t.height != h) {
    const Tensor rotated = shift::rotate_cw(img);
    if (t.height < h) return shift::rotate_ccw(shift::retarget_width(source, rotated, t.height, lambda));
    return shift::rotate_ccw(
        shift::enlarge_width(source, rotated, static_cast<double>(t.height) / static_cast<double>(h), gamma, lambda));
  }
  return img;
}

/// Attention and shift map of a width reduction, for inspection.
template <typename Source>
void dump_maps(const Source& source, const Tensor& img, std::size_t target_width, double lambda,
               const std::string& attention_path, const std::string& shift_path) {
  const Tensor a_d = source.attention(img);
  if (!attention_path.empty()) data::save_gray_png(a_d, attention_path, 16);
  if (shift_path.empty()) return;
  if (target_width >= img.dim(3)) throw ConfigError("--dump-shift needs a width reduction");
  const auto pass = shift::shift_forward(ad::constant(a_d), ad::constant(img), source.filter(img.dim(2)), target_width,
                                         lambda);
  save_tensor(pass.shift.values.value(), shift_path);
}

std::vector<double> parse_scales(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad scale '" + item + "'");
    }
    if (!(out.back() > 0 && out.back() <= 1)) throw ConfigError("scales must be in (0, 1]");
  }
  if (out.empty()) throw ConfigError("no scales given");
  return out;
}

// ---------------------------------------------------------------------------

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;

  std::string data_dir, out, log, classifier, checkpoint, input, output, method, scales, csv;
  std::string dump_attention, dump_shift;
  std::optional<std::size_t> count, size, epochs, width, height, frames;
  std::optional<double> ratio, lr, structure_weight, factor;
  double gamma = 1.0;
  double lambda = 0.2;
  std::vector<std::size_t> widths;
};

int run_gen_data(const Options& o, const json& config) {
  data::DatasetConfig cfg;
  overlay(section(config, "data"), cfg);
  if (o.count) cfg.count = *o.count;
  if (o.size) cfg.size = *o.size;
  if (o.seed) cfg.seed = *o.seed;
  const auto m = data::generate_dataset(cfg, o.out);
  std::cout << "wrote " << m.json.at("samples").size() << " samples to " << o.out << '\n';
  return 0;
}

int run_pretrain(const Options& o, const json& config) {
  train::PretrainConfig cfg;
  overlay(section(config, "pretrain"), cfg);
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.lr) cfg.lr = *o.lr;
  if (o.seed) cfg.seed = *o.seed;
  if (!o.widths.empty()) {
    if (o.widths.size() != 3) throw ConfigError("--widths takes three channel counts");
    cfg.widths = {o.widths[0], o.widths[1], o.widths[2]};
  }
  const auto d = data::load_dataset(o.data_dir);
  auto log = open_log(o.log);
  const auto r = train::pretrain_classifier(d, cfg, log.get());
  nn::save_checkpoint(r.model, o.out);
  std::cout << "best eval mAP " << r.best_eval_map << " at epoch " << r.best_epoch << "; saved " << o.out << '\n';
  return 0;
}

int run_train(const Options& o, const json& config) {
  train::TrainConfig cfg;
  overlay(section(config, "train"), cfg);
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.lr) cfg.lr = *o.lr;
  if (o.structure_weight) cfg.structure_weight = *o.structure_weight;
  if (o.seed) cfg.seed = *o.seed;
  const auto classifier = require_checkpoint(o.classifier, nn::ModelKind::classifier);
  const auto d = data::load_dataset(o.data_dir);
  auto log = open_log(o.log);
  const auto r = train::train_retargeter(d, classifier, cfg, log.get());
  nn::save_checkpoint(r.model, o.out);
  std::cout << "eval loss " << r.initial_eval_loss << " -> " << r.best_eval_loss << " (epoch " << r.best_epoch
            << "); saved " << o.out << '\n';
  return 0;
}

int run_retarget(const Options& o) {
  const auto image = data::load_png(o.input);
  const Tensor img = data::to_tensor(image);
  const TargetSize t = resolve_target(img, o.width, o.height, o.ratio);
  if (t.width == img.dim(3) && t.height == img.dim(2)) {
    data::save_png(image, o.output);
    return 0;
  }
  const auto model = optional_retargeter(o.checkpoint);
  Tensor out;
  if (model) {
    const shift::ModelSource source(*model);
    if (!o.dump_attention.empty() || !o.dump_shift.empty()) dump_maps(source, img, t.width, o.lambda, o.dump_attention, o.dump_shift);
    out = resize_with(source, img, t, o.lambda, o.gamma);
  } else {
    const shift::UniformSource source;
    if (!o.dump_attention.empty() || !o.dump_shift.empty()) dump_maps(source, img, t.width, o.lambda, o.dump_attention, o.dump_shift);
    out = resize_with(source, img, t, o.lambda, o.gamma);
  }
  data::save_png(data::from_tensor(out), o.output);
  return 0;
}

int run_enlarge(const Options& o) {
  if (!o.factor) throw ConfigError("--factor is required");
  const Tensor img = data::to_tensor(data::load_png(o.input));
  const auto model = optional_retargeter(o.checkpoint);
  const Tensor out = model ? shift::enlarge_width(shift::ModelSource(*model), img, *o.factor, o.gamma, o.lambda)
                           : shift::enlarge_width(shift::UniformSource{}, img, *o.factor, o.gamma, o.lambda);
  data::save_png(data::from_tensor(out), o.output);
  return 0;
}

int run_baseline(const Options& o) {
  const Tensor img = data::to_tensor(data::load_png(o.input));
  const TargetSize t = resolve_target(img, o.width, std::nullopt, o.ratio);
  const Tensor out = baseline::apply(baseline::parse_method(o.method), img, t.width);
  data::save_png(data::from_tensor(out), o.output);
  return 0;
}

int run_eval(const Options& o, const json& config) {
  const json ev = section(config, "eval");
  check_keys(ev, {"scales", "lambda"}, "eval");
  std::vector<double> scales = eval::kDefaultScales;
  if (ev.contains("scales")) scales = ev.at("scales").get<std::vector<double>>();
  if (!o.scales.empty()) scales = parse_scales(o.scales);
  double lambda = ev.value("lambda", o.lambda);

  const auto retargeter = require_checkpoint(o.checkpoint, nn::ModelKind::retargeter);
  const auto classifier = require_checkpoint(o.classifier, nn::ModelKind::classifier);
  const auto d = data::load_dataset(o.data_dir);
  auto report = eval::map_ratio_experiment(d, d.eval, retargeter, classifier, scales, lambda);
  report.meta["retargeter_id"] = hex64(fnv1a_file(o.checkpoint));
  report.meta["classifier_id"] = hex64(fnv1a_file(o.classifier));
  write_text(o.out, report.to_json().dump(1) + "\n");
  if (!o.csv.empty()) write_text(o.csv, report.to_csv());
  for (const auto& [name, r] : report.methods) {
    std::cout << name;
    for (double v : r) std::cout << ' ' << v;
    std::cout << '\n';
  }
  return 0;
}

int run_anim(const Options& o) {
  const Tensor img = data::to_tensor(data::load_png(o.input));
  const auto model = optional_retargeter(o.checkpoint);
  const std::size_t frames = o.frames.value_or(7);
  if (frames < 2) throw ConfigError("--frames must be >= 2");
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw IoError("cannot create " + o.out);
  const std::size_t w = img.dim(3);
  for (std::size_t f = 0; f < frames; ++f) {
    const double ratio = 0.9 - 0.6 * static_cast<double>(f) / static_cast<double>(frames - 1);
    const auto tw = static_cast<std::size_t>(std::max<long long>(1, std::llround(ratio * static_cast<double>(w))));
    const Tensor out = model ? shift::retarget_width(shift::ModelSource(*model), img, tw, o.lambda)
                             : shift::retarget_width(shift::UniformSource{}, img, tw, o.lambda);
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03zu.png", f);
    data::save_png(data::from_tensor(out), (fs::path(o.out) / name).string());
  }
  std::cout << "wrote " << frames << " frames to " << o.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Content-aware image retargeting with a learned shift map"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "JSON config with data/pretrain/train/eval sections");
  app.add_option("--seed", o.seed, "Seed overriding the config");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic shapes dataset");
  gen->add_option("--out", o.out, "Output directory")->required();
  gen->add_option("--count", o.count, "Number of samples");
  gen->add_option("--size", o.size, "Image side in pixels");

  auto* pre = app.add_subcommand("pretrain", "Train the classifier");
  pre->add_option("--data", o.data_dir, "Dataset directory")->required();
  pre->add_option("--out", o.out, "Output checkpoint")->required();
  pre->add_option("--log", o.log, "Per-epoch JSON log");
  pre->add_option("--epochs", o.epochs, "Epochs");
  pre->add_option("--lr", o.lr, "Learning rate");
  pre->add_option("--widths", o.widths, "Three channel widths")->delimiter(',');

  auto* tr = app.add_subcommand("train", "Train the retargeting network against a frozen classifier");
  tr->add_option("--data", o.data_dir, "Dataset directory")->required();
  tr->add_option("--classifier", o.classifier, "Pretrained classifier checkpoint")->required();
  tr->add_option("--out", o.out, "Output checkpoint")->required();
  tr->add_option("--log", o.log, "Per-step JSON log");
  tr->add_option("--epochs", o.epochs, "Epochs");
  tr->add_option("--lr", o.lr, "Learning rate");
  tr->add_option("--structure-weight", o.structure_weight, "Weight of the structure loss");

  auto* rt = app.add_subcommand("retarget", "Change the width or height of an image");
  rt->add_option("--input", o.input, "Input PNG")->required();
  rt->add_option("--output", o.output, "Output PNG")->required();
  rt->add_option("--width", o.width, "Target width");
  rt->add_option("--height", o.height, "Target height");
  rt->add_option("--ratio", o.ratio, "Target width as a fraction of the input width");
  rt->add_option("--checkpoint", o.checkpoint, "Retargeter checkpoint (uniform attention if omitted)");
  rt->add_option("--dump-attention", o.dump_attention, "Write the decoder attention as a 16-bit PNG");
  rt->add_option("--dump-shift", o.dump_shift, "Write the shift map as a tensor file");
  rt->add_option("--lambda", o.lambda, "Weight of the column-filtered attention");
  rt->add_option("--gamma", o.gamma, "Attention inversion exponent when enlarging");

  auto* en = app.add_subcommand("enlarge", "Widen an image by a factor");
  en->add_option("--input", o.input, "Input PNG")->required();
  en->add_option("--output", o.output, "Output PNG")->required();
  en->add_option("--factor", o.factor, "Width factor >= 1")->required();
  en->add_option("--gamma", o.gamma, "Attention inversion exponent");
  en->add_option("--checkpoint", o.checkpoint, "Retargeter checkpoint (uniform attention if omitted)");
  en->add_option("--lambda", o.lambda, "Weight of the column-filtered attention");

  auto* bl = app.add_subcommand("baseline", "Resize with a classic method");
  bl->add_option("--input", o.input, "Input PNG")->required();
  bl->add_option("--output", o.output, "Output PNG")->required();
  bl->add_option("--method", o.method, "linear, center, edge or seam")->required();
  bl->add_option("--width", o.width, "Target width");
  bl->add_option("--ratio", o.ratio, "Target width as a fraction of the input width");

  auto* ev = app.add_subcommand("eval", "mAP-ratio experiment on the eval split");
  ev->add_option("--data", o.data_dir, "Dataset directory")->required();
  ev->add_option("--checkpoint", o.checkpoint, "Retargeter checkpoint")->required();
  ev->add_option("--classifier", o.classifier, "Separately trained evaluation classifier")->required();
  ev->add_option("--out", o.out, "Report JSON")->required();
  ev->add_option("--csv", o.csv, "Report CSV");
  ev->add_option("--scales", o.scales, "Comma-separated width fractions");
  ev->add_option("--lambda", o.lambda, "Weight of the column-filtered attention");

  auto* an = app.add_subcommand("anim", "Width sweep from 0.9 to 0.3 as numbered frames");
  an->add_option("--input", o.input, "Input PNG")->required();
  an->add_option("--out", o.out, "Output directory")->required();
  an->add_option("--checkpoint", o.checkpoint, "Retargeter checkpoint (uniform attention if omitted)");
  an->add_option("--frames", o.frames, "Number of frames");
  an->add_option("--lambda", o.lambda, "Weight of the column-filtered attention");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    const json config = load_config(o.config);
    if (gen->parsed()) return run_gen_data(o, config);
    if (pre->parsed()) return run_pretrain(o, config);
    if (tr->parsed()) return run_train(o, config);
    if (rt->parsed()) return run_retarget(o);
    if (en->parsed()) return run_enlarge(o);
    if (bl->parsed()) return run_baseline(o);
    if (ev->parsed()) return run_eval(o, config);
    if (an->parsed()) return run_anim(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
