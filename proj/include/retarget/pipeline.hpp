// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end retargeting built on the shift layer.
//
// An attention source provides two things:
//   Tensor attention(const Tensor& image) const;   // A_d, [N,1,H,W]
//   ColumnFilter filter(std::size_t height) const;  // 1D duplicate-conv weights
// ModelSource wraps a trained encoder-decoder; UniformSource is the flat
// attention that reduces the pipeline to linear scaling.

#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "retarget/autodiff.hpp"
#include "retarget/networks.hpp"
#include "retarget/ops.hpp"
#include "retarget/shift_layer.hpp"

namespace retarget::shift {

struct ColumnFilter {
  ad::Var weight;  ///< [H]
  ad::Var bias;    ///< [1]
};

/// Every intermediate of one differentiable retargeting pass.
struct ForwardPass {
  AttentionMap decoder;
  AttentionMap resized;
  AttentionMap duplicated;
  AttentionMap combined;
  ShiftMap shift;
  ad::Var output;
};

/// Attention -> shift map -> warp for images[N,C,H,W] given A_d[N,1,H,W].
inline ForwardPass shift_forward(const ad::Var& a_d, const ad::Var& images, const ColumnFilter& filter,
                                 std::size_t target_width, double lambda) {
  const auto& is = images.shape();
  if (is.size() != 4) throw DimensionError("images must be NCHW");
  RetargetSpec spec{is[3], is[2], target_width, lambda};
  spec.validate();
  if (!spec.reducing()) throw SpecError("shift_forward reduces width; use enlarge for W' > W");
  ForwardPass f;
  f.decoder = {a_d, AttentionStage::decoder};
  f.resized = resize_attention(f.decoder, spec);
  f.duplicated = duplicate_conv(f.resized, filter.weight, filter.bias);
  f.combined = combine(f.resized, f.duplicated, lambda);
  f.shift = cumulative_normalize(f.combined, spec);
  f.output = warp(images, f.shift);
  return f;
}

/// Resamples the trained column filter to `height` taps, preserving its sum.
inline ColumnFilter column_filter(const nn::Model& m, std::size_t height, bool track = false) {
  const auto id = nn::column_conv_id(m);
  ad::Var w = m.use(id + ".w", track);
  ad::Var b = m.use(id + ".b", track);
  const std::size_t n = w.shape()[0];
  if (height == n) return {w, b};
  ad::Var resized = ad::resize_bilinear(ad::reshape(w, {1, n}), 1, height);
  return {ad::scale(ad::reshape(resized, {height}), static_cast<double>(n) / static_cast<double>(height)), b};
}

/// Full differentiable pass through an encoder-decoder model.
inline ForwardPass retarget_forward(const nn::Model& m, const ad::Var& images, std::size_t target_width, double lambda,
                                    bool track = true) {
  const ad::Var a_d = nn::decoder_attention(m, images, track);
  return shift_forward(a_d, images, column_filter(m, images.shape()[2], track), target_width, lambda);
}

inline std::size_t round_up8(std::size_t v) { return std::max<std::size_t>(8, (v + 7) / 8 * 8); }

class ModelSource {
 public:
  explicit ModelSource(const nn::Model& model) : model_(&model) {}

  /// A_d at the image's own size; images whose sides are not multiples of 8
  /// are resampled for the encoder and the map is resampled back.
  Tensor attention(const Tensor& image) const {
    const std::size_t h = image.dim(2), w = image.dim(3);
    const std::size_t h8 = round_up8(h), w8 = round_up8(w);
    ad::Var x = ad::constant(image);
    if (h8 != h || w8 != w) x = ad::resize_bilinear(x, h8, w8);
    ad::Var a = nn::decoder_attention(*model_, x, false);
    if (h8 != h || w8 != w) a = ad::resize_bilinear(a, h, w);
    return a.value();
  }

  ColumnFilter filter(std::size_t height) const { return column_filter(*model_, height, false); }

 private:
  const nn::Model* model_;
};

/// Flat attention with a column-mean filter.
struct UniformSource {
  Tensor attention(const Tensor& image) const { return Tensor::ones({image.dim(0), 1, image.dim(2), image.dim(3)}); }
  ColumnFilter filter(std::size_t height) const {
    return {ad::constant(Tensor({height}, 1.0 / static_cast<double>(height))), ad::constant(Tensor::zeros({1}))};
  }
};

template <typename Source>
Tensor retarget_width(const Source& source, const Tensor& image, std::size_t target_width, double lambda = 0.2) {
  const Tensor a_d = source.attention(image);
  return shift_forward(ad::constant(a_d), ad::constant(image), source.filter(image.dim(2)), target_width, lambda)
      .output.value();
}

/// Quarter turn clockwise of the last two axes: out[.., x, H-1-y] = in[.., y, x].
inline Tensor rotate_cw(const Tensor& t) {
  const std::size_t n = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
  Tensor out({n, c, w, h});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out.at(b, k, x, h - 1 - y) = t.at(b, k, y, x);
  return out;
}

/// Inverse of rotate_cw.
inline Tensor rotate_ccw(const Tensor& t) {
  const std::size_t n = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
  Tensor out({n, c, w, h});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out.at(b, k, w - 1 - x, y) = t.at(b, k, y, x);
  return out;
}

/// Height change by rotating, retargeting the width and rotating back.
template <typename Source>
Tensor retarget_height(const Source& source, const Tensor& image, std::size_t target_height, double lambda = 0.2) {
  return rotate_ccw(retarget_width(source, rotate_cw(image), target_height, lambda));
}

/// Attention on the input grid for enlarging by `factor`: the combined map
/// for a reduction to W / factor, resized back to W.
template <typename Source>
Tensor enlarging_attention(const Source& source, const Tensor& image, double factor, double lambda = 0.2) {
  const std::size_t h = image.dim(2), w = image.dim(3);
  const auto reduced = static_cast<std::size_t>(std::max(1.0, std::round(static_cast<double>(w) / factor)));
  const Tensor a_d = source.attention(image);
  RetargetSpec spec{w, h, std::min(reduced, w), lambda};
  const auto filter = source.filter(h);
  const AttentionMap a_r = resize_attention({ad::constant(a_d), AttentionStage::decoder}, spec);
  const AttentionMap a = combine(a_r, duplicate_conv(a_r, filter.weight, filter.bias), lambda);
  return ad::resize_bilinear(a.values, h, w).value();
}

template <typename Source>
Tensor enlarge_width(const Source& source, const Tensor& image, double factor, double gamma = 1.0,
                     double lambda = 0.2) {
  if (!(factor >= 1.0)) throw SpecError("enlarge factor must be >= 1");
  const std::size_t h = image.dim(2), w = image.dim(3);
  const auto target = static_cast<std::size_t>(std::llround(factor * static_cast<double>(w)));
  if (target == w) return image;
  const Tensor a = enlarging_attention(source, image, factor, lambda);
  RetargetSpec spec{w, h, target, lambda, gamma};
  return enlarge(image, {ad::constant(a), AttentionStage::combined}, spec);
}

}  // namespace retarget::shift
