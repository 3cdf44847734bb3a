// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

// SGD with momentum, classifier pretraining and end-to-end retargeter
// training with a random target width per batch.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retarget/autodiff.hpp"
#include "retarget/data.hpp"
#include "retarget/eval.hpp"
#include "retarget/losses.hpp"
#include "retarget/networks.hpp"
#include "retarget/pipeline.hpp"

namespace retarget::train {

struct OptimizerState {
  std::map<std::string, Tensor> velocity;
};

/// v <- momentum * v + g;  p <- p - lr * v.
inline void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum) {
  if (param.shape() != grad.shape() || param.shape() != velocity.shape()) {
    throw ContractError("sgd_step: parameter, gradient and velocity shapes differ");
  }
  auto& p = param.storage();
  auto& v = velocity.storage();
  const auto& g = grad.storage();
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = momentum * v[i] + g[i];
    p[i] -= lr * v[i];
  }
}

/// Updates every trainable parameter of `m` from its accumulated gradient.
/// Frozen parameters never get optimizer state.
inline void sgd_step(nn::Model& m, OptimizerState& state, double lr, double momentum) {
  for (const auto& name : m.trainable()) {
    auto& var = m.params.at(name);
    auto it = state.velocity.find(name);
    if (it == state.velocity.end()) it = state.velocity.emplace(name, Tensor::zeros_like(var.value())).first;
    sgd_step(var.mutable_value(), var.grad(), it->second, lr, momentum);
  }
}

inline void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[data::detail::below(rng, i)]);
}

inline std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < order.size(); s += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + batch)));
  }
  return out;
}

inline void check_finite(double v, const std::string& what, std::size_t step) {
  if (!std::isfinite(v)) {
    throw DivergenceError(what + " became non-finite at step " + std::to_string(step));
  }
}

// ---------------------------------------------------------------------------
// Classifier pretraining

struct PretrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  std::size_t batch = 8;
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  nn::ClassifierWidths widths{};
  /// Cosine decay of the learning rate from lr towards 0 over the run.
  bool cosine = true;

  double lr_at(std::size_t epoch) const {
    if (!cosine || epochs == 0) return lr;
    constexpr double pi = 3.14159265358979323846;
    return lr * 0.5 * (1.0 + std::cos(pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
  }

  void validate() const {
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (!(lr > 0)) throw ConfigError("learning rate must be > 0");
  }
};

struct PretrainResult {
  nn::Model model;
  double best_eval_map = 0.0;
  std::size_t best_epoch = 0;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_eval_map;
};

/// Trains a classifier on full-size images with the per-class sigmoid
/// cross-entropy and keeps the epoch with the best eval mAP. One JSON record
/// per epoch goes to `log`.
inline PretrainResult pretrain_classifier(const data::Dataset& d, const PretrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  if (d.train.empty()) throw ConfigError("dataset has no training samples");
  std::mt19937_64 rng(cfg.seed);
  nn::Model model = nn::build_classifier(d.num_classes(), rng, cfg.widths, d.samples[d.train.front()].image.width);
  OptimizerState state;
  PretrainResult result;
  bool have_best = false;
  std::vector<std::size_t> order = d.train;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, rng);
    const double lr = cfg.lr_at(epoch);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const auto& idx : batches_of(order, cfg.batch)) {
      auto [x, y] = data::make_batch(d, idx);
      const ad::Var logits = nn::classify(model, ad::constant(std::move(x)), true).logits;
      const ad::Var loss = loss::content_loss(logits, y);
      check_finite(loss.value().item(), "pretraining loss", step);
      ad::backward(loss);
      sgd_step(model, state, lr, cfg.momentum);
      model.zero_grad();
      loss_sum += loss.value().item() * static_cast<double>(idx.size());
      seen += idx.size();
      ++step;
    }
    const double eval_map = d.eval.empty() ? 0.0 : eval::dataset_map(model, d, d.eval);
    result.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
    result.epoch_eval_map.push_back(eval_map);
    if (log) {
      *log << nlohmann::json{{"epoch", epoch}, {"lr", lr}, {"loss", result.epoch_loss.back()}, {"eval_map", eval_map}}.dump()
           << '\n';
    }
    if (!have_best || eval_map > result.best_eval_map) {
      have_best = true;
      result.best_eval_map = eval_map;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  if (!have_best) result.model = model;
  return result;
}

// ---------------------------------------------------------------------------
// Retargeter training

struct TrainConfig {
  double lr = 1e-4;
  double momentum = 0.9;
  std::size_t batch = 8;
  std::size_t epochs = 30;
  double lambda = 0.2;
  double gamma = 1.0;
  double structure_weight = 1.0;
  double ratio_min = 0.25;
  double ratio_max = 0.5;
  std::uint64_t seed = 1;
  /// Where to dump the offending batch if a shift-map invariant fails.
  std::string debug_dir;

  void validate() const {
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
    if (!(ratio_min > 0 && ratio_min <= ratio_max && ratio_max < 1)) {
      throw ConfigError("need 0 < ratio_min <= ratio_max < 1");
    }
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (!(lr > 0)) throw ConfigError("learning rate must be > 0");
    if (lambda < 0 || structure_weight < 0) throw ConfigError("lambda and structure weight must be >= 0");
  }

  std::size_t min_width(std::size_t w) const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(ratio_min * static_cast<double>(w) - 1e-9)));
  }
  std::size_t max_width(std::size_t w) const {
    return std::max(min_width(w), static_cast<std::size_t>(std::floor(ratio_max * static_cast<double>(w) + 1e-9)));
  }
};

/// Losses of one forward pass of the full pipeline.
struct StepLosses {
  ad::Var content;
  ad::Var structure;
  ad::Var total;
  shift::ForwardPass pass;
};

/// attention -> shift -> warp -> pad -> frozen classifier, plus the structure term.
inline StepLosses pipeline_losses(const nn::Model& retargeter, const nn::Model& classifier, const Tensor& images,
                                  const Tensor& labels, std::size_t target_width, double lambda,
                                  double structure_weight, bool track = true) {
  StepLosses s;
  const ad::Var x = ad::constant(images);
  s.pass = shift::retarget_forward(retargeter, x, target_width, lambda, track);
  const ad::Var padded = loss::pad_for_classifier(s.pass.output, images.dim(3));
  s.content = loss::content_loss(nn::classify(classifier, padded, false).logits, labels);
  s.structure = loss::structure_loss(x, s.pass.output, s.pass.shift, classifier);
  s.total = structure_weight > 0 ? ad::add(s.content, ad::scale(s.structure, structure_weight)) : s.content;
  return s;
}

/// Mean losses over `indices`, cycling through three fixed target widths
/// (ratio_min, midpoint, ratio_max) so the number is comparable across epochs.
inline loss::LossReport evaluate_retargeter(const nn::Model& retargeter, const nn::Model& classifier,
                                            const data::Dataset& d, const std::vector<std::size_t>& indices,
                                            const TrainConfig& cfg) {
  const std::size_t w = d.samples[indices.front()].image.width;
  const std::size_t lo = cfg.min_width(w), hi = cfg.max_width(w);
  const std::array<std::size_t, 3> widths = {lo, (lo + hi) / 2, hi};
  loss::LossReport r;
  r.structure_weight = cfg.structure_weight;
  std::size_t count = 0;
  for (std::size_t k = 0; k < widths.size(); ++k) {
    std::vector<std::size_t> group;
    for (std::size_t i = k; i < indices.size(); i += widths.size()) group.push_back(indices[i]);
    for (const auto& idx : batches_of(group, 32)) {
      auto [x, y] = data::make_batch(d, idx);
      const auto s = pipeline_losses(retargeter, classifier, x, y, widths[k], cfg.lambda, cfg.structure_weight, false);
      const double n = static_cast<double>(idx.size());
      r.content += s.content.value().item() * n;
      r.structure += s.structure.value().item() * n;
      count += idx.size();
    }
  }
  r.content /= static_cast<double>(count);
  r.structure /= static_cast<double>(count);
  r.total = r.content + cfg.structure_weight * r.structure;
  return r;
}

/// Keeps the duplicate-convolution filter and bias nonnegative so the
/// combined attention stays nonnegative and the shift map monotone.
inline void project_column_filter(nn::Model& m) {
  const auto id = nn::column_conv_id(m);
  for (const char* suffix : {".w", ".b"}) {
    for (auto& v : m.params.at(id + suffix).mutable_value().storage()) v = std::max(v, 0.0);
  }
}

struct RetargetResult {
  nn::Model model;
  double initial_eval_loss = 0.0;
  double best_eval_loss = 0.0;
  std::size_t best_epoch = 0;
  std::vector<loss::LossReport> eval_history;
};

/// End-to-end training of the decoder and the column filter against a
/// frozen classifier. One JSON record per step ({step, epoch, E_c, E_s,
/// total, W'}) and one per epoch evaluation go to `log`.
inline RetargetResult train_retargeter(const data::Dataset& d, const nn::Model& classifier, const TrainConfig& cfg,
                                       std::ostream* log = nullptr) {
  cfg.validate();
  if (d.train.empty() || d.eval.empty()) throw ConfigError("dataset needs train and eval samples");
  std::mt19937_64 rng(cfg.seed);
  nn::Model frozen = classifier;
  for (std::size_t i = 0; i < frozen.layers.size(); ++i) {
    if (frozen.layers[i].has_params()) frozen.freeze(i);
  }
  nn::Model model = nn::build_encoder_decoder(frozen, rng);
  const std::size_t w = d.samples[d.train.front()].image.width;

  RetargetResult result;
  const auto initial = evaluate_retargeter(model, frozen, d, d.eval, cfg);
  result.initial_eval_loss = initial.total;
  result.best_eval_loss = initial.total;
  result.model = model;
  if (log) *log << nlohmann::json{{"epoch", -1}, {"eval", loss::to_json(initial)}}.dump() << '\n';

  OptimizerState state;
  std::vector<std::size_t> order = d.train;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, rng);
    for (const auto& idx : batches_of(order, cfg.batch)) {
      const auto target = static_cast<std::size_t>(
          data::detail::between(rng, static_cast<long>(cfg.min_width(w)), static_cast<long>(cfg.max_width(w))));
      auto [x, y] = data::make_batch(d, idx);
      StepLosses s;
      try {
        s = pipeline_losses(model, frozen, x, y, target, cfg.lambda, cfg.structure_weight, true);
      } catch (const Error& e) {
        if (!cfg.debug_dir.empty()) {
          std::filesystem::create_directories(cfg.debug_dir);
          const auto base = (std::filesystem::path(cfg.debug_dir) / ("step" + std::to_string(step))).string();
          save_tensor(x, base + "_images.rtft");
          save_tensor(nn::decoder_attention(model, ad::constant(x), false).value(), base + "_attention.rtft");
          nn::save_checkpoint(model, base + "_model.rtck");
        }
        throw InvariantError("training step " + std::to_string(step) + " (W'=" + std::to_string(target) +
                             ") failed: " + e.what());
      }
      const double ec = s.content.value().item(), es = s.structure.value().item(), total = s.total.value().item();
      check_finite(total, "training loss", step);
      ad::backward(s.total);
      sgd_step(model, state, cfg.lr, cfg.momentum);
      project_column_filter(model);
      model.zero_grad();
      if (log) {
        *log << nlohmann::json{{"step", step}, {"epoch", epoch}, {"E_c", ec}, {"E_s", es}, {"total", total},
                               {"W'", target}}
                    .dump()
             << '\n';
      }
      ++step;
    }
    const auto ev = evaluate_retargeter(model, frozen, d, d.eval, cfg);
    result.eval_history.push_back(ev);
    if (log) *log << nlohmann::json{{"epoch", epoch}, {"eval", loss::to_json(ev)}}.dump() << '\n';
    if (ev.total < result.best_eval_loss) {
      result.best_eval_loss = ev.total;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

}  // namespace retarget::train
