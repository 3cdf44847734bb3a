// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

// Miniature classifier and encoder-decoder models plus the RTCK checkpoint
// container.
//
// Both models are plain layer lists. The classifier trunk is
//   conv(3->c1) elu, conv(c1->c1) elu, pool, conv(c1->c2) elu, pool,
//   conv(c2->c3) elu, pool, global-average-pool, dense(c3->C)
// and its first two convolutions are the low-level feature maps used by the
// structure loss. The encoder-decoder reuses the trunk (frozen) and mirrors
// it with upsample+conv stages that end in a one-channel sigmoid map.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "retarget/autodiff.hpp"
#include "retarget/errors.hpp"
#include "retarget/ops.hpp"
#include "retarget/tensor.hpp"

namespace retarget::nn {

enum class LayerKind : int { conv = 1, maxpool2 = 2, upsample2 = 3, global_avg_pool = 4, dense = 5, column_conv = 6 };
enum class Activation : int { none = 0, elu = 1, sigmoid = 2 };
enum class ModelKind : int { classifier = 1, retargeter = 2 };

struct LayerDesc {
  LayerKind kind{};
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  Activation act = Activation::none;

  bool has_params() const {
    return kind == LayerKind::conv || kind == LayerKind::dense || kind == LayerKind::column_conv;
  }
  friend bool operator==(const LayerDesc&, const LayerDesc&) = default;
};

inline std::string layer_id(std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "L%02zu", index);
  return buf;
}

/// Channel widths of the three classifier stages.
struct ClassifierWidths {
  std::size_t c1 = 8;
  std::size_t c2 = 16;
  std::size_t c3 = 32;
};

class Model {
 public:
  ModelKind kind = ModelKind::classifier;
  /// Nominal square input size the model was built for.
  std::size_t input_size = 64;
  std::vector<LayerDesc> layers;
  /// Parameter tensors keyed "<layer-id>.w" / "<layer-id>.b".
  std::map<std::string, ad::Var> params;
  std::set<std::string> frozen;

  Model() = default;
  Model(const Model& other) { *this = other; }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  /// Deep copy: parameter tensors are duplicated, never shared.
  Model& operator=(const Model& other) {
    if (this == &other) return *this;
    kind = other.kind;
    input_size = other.input_size;
    layers = other.layers;
    frozen = other.frozen;
    params.clear();
    for (const auto& [name, var] : other.params) params.emplace(name, ad::Var(var.value(), var.requires_grad()));
    return *this;
  }

  bool is_frozen(std::size_t layer) const { return frozen.count(layer_id(layer)) != 0; }

  const ad::Var& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw IntegrityError("missing parameter " + name);
    return it->second;
  }

  /// Parameter view for a forward pass: tracked params join the graph,
  /// otherwise a constant copy is returned.
  ad::Var use(const std::string& name, bool track) const {
    const auto& p = param(name);
    if (track && p.requires_grad()) return p;
    return ad::constant(p.value());
  }

  /// Names of parameters that receive updates.
  std::vector<std::string> trainable() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (!layers[i].has_params() || is_frozen(i)) continue;
      names.push_back(layer_id(i) + ".w");
      names.push_back(layer_id(i) + ".b");
    }
    return names;
  }

  void zero_grad() {
    for (auto& [_, v] : params) v.zero_grad();
  }

  /// Marks a layer frozen and stops gradient tracking on its parameters.
  void freeze(std::size_t layer) {
    const auto id = layer_id(layer);
    frozen.insert(id);
    for (const char* suffix : {".w", ".b"}) {
      auto it = params.find(id + suffix);
      if (it != params.end()) it->second.set_requires_grad(false);
    }
  }
};

struct ClassifierOutput {
  ad::Var logits;
  /// Post-activation outputs of the first two convolutions.
  std::vector<ad::Var> features;
};

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

inline void add_conv(Model& m, std::size_t in, std::size_t out, Activation act, std::mt19937_64& rng,
                     double gain = 1.0) {
  const auto id = layer_id(m.layers.size());
  m.layers.push_back({LayerKind::conv, in, out, 3, act});
  m.params.emplace(id + ".w", ad::parameter(he_normal({out, in, 3, 3}, in * 9, rng, gain)));
  m.params.emplace(id + ".b", ad::parameter(Tensor::zeros({out})));
}

inline void add_plain(Model& m, LayerKind kind) { m.layers.push_back({kind, 0, 0, 0, Activation::none}); }

inline ad::Var activate(const ad::Var& x, Activation act) {
  switch (act) {
    case Activation::none: return x;
    case Activation::elu: return ad::elu(x);
    case Activation::sigmoid: return ad::sigmoid(x);
  }
  return x;
}

/// Subtracted from [0,1] pixels on entry to the trunk; SGD on uncentred
/// inputs stalls for many epochs on the shapes data.
inline constexpr double kInputMean = 0.5;

/// Runs layers [begin, end). Column-conv layers are skipped; they belong to
/// the shift layer. When `features` is given, the post-activation outputs
/// of the first two conv layers are appended to it.
inline ad::Var run_layers(const Model& m, ad::Var x, std::size_t begin, std::size_t end, bool track,
                          std::vector<ad::Var>* features = nullptr, std::size_t stop_after_features = 0) {
  if (begin == 0) x = ad::add_scalar(x, -kInputMean);
  std::size_t convs_seen = 0;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& l = m.layers[i];
    const auto id = layer_id(i);
    switch (l.kind) {
      case LayerKind::conv: {
        if (x.shape().size() != 4 || x.shape()[1] != l.in) {
          throw DimensionError("layer " + id + " expects " + std::to_string(l.in) + " channels, got " +
                               shape_str(x.shape()));
        }
        x = activate(ad::conv2d(x, m.use(id + ".w", track), m.use(id + ".b", track)), l.act);
        if (features && convs_seen < 2) features->push_back(x);
        ++convs_seen;
        if (stop_after_features && convs_seen == stop_after_features) return x;
        break;
      }
      case LayerKind::maxpool2: x = ad::maxpool2(x); break;
      case LayerKind::upsample2: x = ad::resize_bilinear(x, x.shape()[2] * 2, x.shape()[3] * 2); break;
      case LayerKind::global_avg_pool: x = ad::global_avg_pool(x); break;
      case LayerKind::dense:
        x = ad::linear(x, m.use(id + ".w", track), m.use(id + ".b", track));
        break;
      case LayerKind::column_conv: break;
    }
  }
  return x;
}

/// Index one past the last trunk layer (conv/pool prefix) of a classifier.
inline std::size_t trunk_end(const Model& m) {
  std::size_t i = 0;
  while (i < m.layers.size() && (m.layers[i].kind == LayerKind::conv || m.layers[i].kind == LayerKind::maxpool2)) ++i;
  return i;
}

}  // namespace detail

/// Classifier with He-initialized weights drawn from `rng`.
inline Model build_classifier(std::size_t num_classes, std::mt19937_64& rng, ClassifierWidths widths = {},
                              std::size_t input_size = 64) {
  if (num_classes < 1) throw ContractError("classifier needs at least one class");
  Model m;
  m.kind = ModelKind::classifier;
  m.input_size = input_size;
  detail::add_conv(m, 3, widths.c1, Activation::elu, rng);
  detail::add_conv(m, widths.c1, widths.c1, Activation::elu, rng);
  detail::add_plain(m, LayerKind::maxpool2);
  detail::add_conv(m, widths.c1, widths.c2, Activation::elu, rng);
  detail::add_plain(m, LayerKind::maxpool2);
  detail::add_conv(m, widths.c2, widths.c3, Activation::elu, rng);
  detail::add_plain(m, LayerKind::maxpool2);
  detail::add_plain(m, LayerKind::global_avg_pool);
  const auto id = layer_id(m.layers.size());
  m.layers.push_back({LayerKind::dense, widths.c3, num_classes, 0, Activation::none});
  m.params.emplace(id + ".w", ad::parameter(detail::he_normal({num_classes, widths.c3}, widths.c3, rng)));
  m.params.emplace(id + ".b", ad::parameter(Tensor::zeros({num_classes})));
  return m;
}

inline std::size_t num_classes(const Model& classifier) {
  for (auto it = classifier.layers.rbegin(); it != classifier.layers.rend(); ++it) {
    if (it->kind == LayerKind::dense) return it->out;
  }
  throw ContractError("model has no dense head");
}

/// Logits and first-block features for x[N,3,H,W].
inline ClassifierOutput classify(const Model& classifier, const ad::Var& x, bool track = true) {
  if (classifier.kind != ModelKind::classifier) throw ContractError("classify needs a classifier model");
  ClassifierOutput out;
  out.logits = detail::run_layers(classifier, x, 0, classifier.layers.size(), track, &out.features);
  return out;
}

/// Only the first two feature maps, skipping the rest of the network.
inline std::vector<ad::Var> low_level_features(const Model& classifier, const ad::Var& x, bool track = false) {
  std::vector<ad::Var> feats;
  detail::run_layers(classifier, x, 0, classifier.layers.size(), track, &feats, 2);
  return feats;
}

/// Encoder-decoder whose encoder is a frozen copy of the classifier trunk.
/// The decoder mirrors each pool with 2x bilinear upsampling and a 3x3
/// conv + ELU, then maps to one channel through a sigmoid. A trailing
/// column-conv layer holds the 1D duplicate-convolution filter (length =
/// input_size, initialized to a column mean) used by the shift layer.
inline Model build_encoder_decoder(const Model& classifier, std::mt19937_64& rng, std::ostream* warn = &std::cerr) {
  if (classifier.kind != ModelKind::classifier) throw ContractError("encoder must come from a classifier");
  Model m;
  m.kind = ModelKind::retargeter;
  m.input_size = classifier.input_size;
  const std::size_t end = detail::trunk_end(classifier);
  bool all_zero = true;
  std::vector<std::size_t> widths;
  for (std::size_t i = 0; i < end; ++i) {
    m.layers.push_back(classifier.layers[i]);
    if (!classifier.layers[i].has_params()) continue;
    widths.push_back(classifier.layers[i].out);
    for (const char* suffix : {".w", ".b"}) {
      const auto& src = classifier.param(layer_id(i) + suffix).value();
      for (double v : src.data()) all_zero = all_zero && v == 0.0;
      m.params.emplace(layer_id(i) + suffix, ad::Var(src, false));
    }
    m.frozen.insert(layer_id(i));
  }
  if (all_zero && warn) *warn << "warning: encoder trunk parameters are all zero (untrained classifier?)\n";

  // widths = {c1, c1, c2, c3}; mirror c3 -> c2 -> c1 -> c1.
  const std::size_t c1 = widths.front(), c3 = widths.back();
  const std::size_t c2 = widths.size() >= 2 ? widths[widths.size() - 2] : c1;
  detail::add_plain(m, LayerKind::upsample2);
  detail::add_conv(m, c3, c2, Activation::elu, rng);
  detail::add_plain(m, LayerKind::upsample2);
  detail::add_conv(m, c2, c1, Activation::elu, rng);
  detail::add_plain(m, LayerKind::upsample2);
  detail::add_conv(m, c1, c1, Activation::elu, rng);
  // Small final gain so the initial attention is nearly flat.
  detail::add_conv(m, c1, 1, Activation::sigmoid, rng, 0.1);

  const auto id = layer_id(m.layers.size());
  m.layers.push_back({LayerKind::column_conv, m.input_size, 1, m.input_size, Activation::none});
  m.params.emplace(id + ".w",
                   ad::parameter(Tensor({m.input_size}, 1.0 / static_cast<double>(m.input_size))));
  m.params.emplace(id + ".b", ad::parameter(Tensor::zeros({1})));
  return m;
}

inline std::size_t encoder_end(const Model& m) { return detail::trunk_end(m); }

inline std::string column_conv_id(const Model& retargeter) {
  for (std::size_t i = 0; i < retargeter.layers.size(); ++i) {
    if (retargeter.layers[i].kind == LayerKind::column_conv) return layer_id(i);
  }
  throw ContractError("model has no column-conv layer");
}

/// Decoder attention A_d[N,1,H,W] for x[N,3,H,W]; H and W must be multiples of 8.
inline ad::Var decoder_attention(const Model& m, const ad::Var& x, bool track = true) {
  if (m.kind != ModelKind::retargeter) throw ContractError("decoder_attention needs an encoder-decoder model");
  const auto& xs = x.shape();
  if (xs.size() != 4 || xs[1] != 3 || xs[2] % 8 != 0 || xs[3] % 8 != 0) {
    throw DimensionError("encoder-decoder input must be [N,3,8a,8b], got " + shape_str(xs));
  }
  const std::size_t enc = encoder_end(m);
  ad::Var h = detail::run_layers(m, x, 0, enc, false);
  return detail::run_layers(m, h, enc, m.layers.size(), track);
}

// ---------------------------------------------------------------------------
// Checkpoints: "RTCK", u8 version, u16 entry count, then per entry a u16
// name length, UTF-8 name and an RTFT tensor. Layer descriptors and the
// frozen set travel as the reserved entries __meta__, __layers__, __frozen__.

namespace detail {
inline constexpr char kCheckpointMagic[4] = {'R', 'T', 'C', 'K'};
inline constexpr std::uint8_t kCheckpointVersion = 1;
}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Model& m) {
  std::vector<std::pair<std::string, Tensor>> entries;
  entries.emplace_back("__meta__", Tensor({3}, {static_cast<double>(m.kind), static_cast<double>(m.input_size),
                                                static_cast<double>(m.layers.size())}));
  Tensor layers({std::max<std::size_t>(m.layers.size(), 1), 5});
  Tensor frozen({std::max<std::size_t>(m.layers.size(), 1)});
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const double row[5] = {static_cast<double>(l.kind), static_cast<double>(l.in), static_cast<double>(l.out),
                           static_cast<double>(l.kernel), static_cast<double>(l.act)};
    std::copy(row, row + 5, layers.data().begin() + static_cast<std::ptrdiff_t>(i * 5));
    frozen[i] = m.is_frozen(i) ? 1.0 : 0.0;
  }
  entries.emplace_back("__layers__", std::move(layers));
  entries.emplace_back("__frozen__", std::move(frozen));
  for (const auto& [name, var] : m.params) entries.emplace_back(name, var.value());

  os.write(detail::kCheckpointMagic, 4);
  retarget::detail::write_le<std::uint8_t>(os, detail::kCheckpointVersion);
  retarget::detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    retarget::detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

inline Model read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw IntegrityError("checkpoint truncated before magic");
  if (std::memcmp(magic, detail::kCheckpointMagic, 4) != 0) throw FormatError("bad checkpoint magic");
  const auto version = retarget::detail::read_le<std::uint8_t>(is);
  if (version != detail::kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = retarget::detail::read_le<std::uint16_t>(is);
  std::map<std::string, Tensor> entries;
  for (std::uint16_t e = 0; e < count; ++e) {
    const auto len = retarget::detail::read_le<std::uint16_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IntegrityError("checkpoint truncated in entry name");
    try {
      entries.emplace(std::move(name), read_tensor(is));
    } catch (const FormatError& e2) {
      throw IntegrityError(std::string("corrupt checkpoint entry: ") + e2.what());
    }
  }
  auto take = [&](const std::string& name) -> Tensor& {
    auto it = entries.find(name);
    if (it == entries.end()) throw IntegrityError("checkpoint missing entry " + name);
    return it->second;
  };
  const Tensor& meta = take("__meta__");
  if (meta.size() != 3) throw IntegrityError("malformed __meta__");
  Model m;
  m.kind = static_cast<ModelKind>(static_cast<int>(meta[0]));
  if (m.kind != ModelKind::classifier && m.kind != ModelKind::retargeter) throw FormatError("unknown model kind");
  m.input_size = static_cast<std::size_t>(meta[1]);
  const auto num_layers = static_cast<std::size_t>(meta[2]);
  const Tensor& layers = take("__layers__");
  const Tensor& frozen = take("__frozen__");
  if (num_layers > 0 && (layers.size() != num_layers * 5 || frozen.size() != num_layers)) {
    throw IntegrityError("layer table size mismatch");
  }
  for (std::size_t i = 0; i < num_layers; ++i) {
    LayerDesc l;
    l.kind = static_cast<LayerKind>(static_cast<int>(layers[i * 5]));
    l.in = static_cast<std::size_t>(layers[i * 5 + 1]);
    l.out = static_cast<std::size_t>(layers[i * 5 + 2]);
    l.kernel = static_cast<std::size_t>(layers[i * 5 + 3]);
    l.act = static_cast<Activation>(static_cast<int>(layers[i * 5 + 4]));
    m.layers.push_back(l);
    if (frozen[i] != 0.0) m.frozen.insert(layer_id(i));
  }
  for (std::size_t i = 0; i < num_layers; ++i) {
    if (!m.layers[i].has_params()) continue;
    for (const char* suffix : {".w", ".b"}) {
      const auto name = layer_id(i) + suffix;
      m.params.emplace(name, ad::Var(take(name), !m.is_frozen(i)));
    }
  }
  return m;
}

inline void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_checkpoint(os, m);
  if (!os) throw IoError("failed writing " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace retarget::nn
