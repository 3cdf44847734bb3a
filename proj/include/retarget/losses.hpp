// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "retarget/autodiff.hpp"
#include "retarget/networks.hpp"
#include "retarget/ops.hpp"
#include "retarget/shift_layer.hpp"

namespace retarget::loss {

struct LossReport {
  double content = 0.0;
  double structure = 0.0;
  double total = 0.0;
  double structure_weight = 1.0;
};

inline nlohmann::json to_json(const LossReport& r) {
  return {{"E_c", r.content}, {"E_s", r.structure}, {"total", r.total}, {"w_s", r.structure_weight}};
}

/// Left offset of a width-`inner` strip centred on a width-`outer` canvas.
inline std::size_t canvas_offset(std::size_t inner, std::size_t outer) { return (outer - inner) / 2; }

/// Centres O[N,C,H,W'] on a canvas of width W filled with `fill`.
inline ad::Var pad_to_canvas(const ad::Var& o, std::size_t width, double fill = 0.0) {
  if (o.shape().size() != 4) throw DimensionError("pad_to_canvas expects NCHW");
  const std::size_t w = o.shape()[3];
  if (w > width) throw ContractError("pad_to_canvas: W' = " + std::to_string(w) + " exceeds W = " + std::to_string(width));
  if (fill == 0.0) return ad::pad_columns(o, width, canvas_offset(w, width));
  return ad::add_scalar(ad::pad_columns(ad::add_scalar(o, -fill), width, canvas_offset(w, width)), fill);
}

/// Padding that the classifier sees as zeros once its input is centred.
inline ad::Var pad_for_classifier(const ad::Var& o, std::size_t width) {
  return pad_to_canvas(o, width, nn::detail::kInputMean);
}

/// Mean per-class sigmoid cross-entropy over logits[N,C] and 0/1 labels[N,C].
inline ad::Var content_loss(const ad::Var& logits, const Tensor& labels) {
  if (logits.shape() != labels.shape()) {
    throw DimensionError("content_loss: logits " + shape_str(logits.shape()) + " vs labels " + shape_str(labels.shape()));
  }
  for (double l : labels.data()) {
    if (l != 0.0 && l != 1.0) throw ContractError("labels must be 0 or 1");
  }
  Tensor inv(labels.shape());
  for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 - labels[i];
  const ad::Var p = ad::sigmoid(logits);
  const ad::Var q = ad::add_scalar(ad::scale(p, -1.0), 1.0);
  const ad::Var ll = ad::add(ad::mul(ad::constant(labels), ad::log(p)), ad::mul(ad::constant(std::move(inv)), ad::log(q)));
  return ad::scale(ad::mean(ll), -1.0);
}

/// Sum over the first two classifier feature maps of the mean absolute
/// difference between features of the retargeted image and features of the
/// source sampled at x + S(x, y).
inline ad::Var structure_loss(const ad::Var& source, const ad::Var& retargeted, const shift::ShiftMap& s,
                              const nn::Model& classifier) {
  const auto feats_out = nn::low_level_features(classifier, retargeted, false);
  const auto feats_src = nn::low_level_features(classifier, source, false);
  const ad::Var coords = shift::source_coordinates(s);
  ad::Var total;
  for (std::size_t j = 0; j < 2; ++j) {
    const auto& fo = feats_out[j].shape();
    const auto& cs = coords.shape();
    if (fo[0] != cs[0] || fo[2] != cs[2] || fo[3] != cs[3]) {
      throw DimensionError("structure_loss: features " + shape_str(fo) + " vs shift " + shape_str(cs));
    }
    const ad::Var sampled = ad::sample_columns(feats_src[j], coords);
    const ad::Var term = ad::mean(ad::abs(ad::sub(feats_out[j], sampled)));
    total = j == 0 ? term : ad::add(total, term);
  }
  return total;
}

}  // namespace retarget::loss
