// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

// Attention map -> shift map -> warped image.
//
// Reduction (W' <= W):
//   A_r  = resize(A_d) to H x W'
//   A_1D = rows-duplicated column filter response of A_r
//   A    = lambda * A_r + A_1D
//   S    = alpha * (exclusive row prefix sum of A) / (row total),  alpha = W - W'
//   O(x, y) = I(x + S(x, y), y)
//
// Enlarging (W' > W) inverts the attention with exp(-A / gamma), builds S on
// the input grid with alpha = W' - W and forward-maps each input column x'
// to x' + S(x').
//
// Because the prefix sum is exclusive, a uniform attention map yields
// x + S = x * W / W', i.e. plain linear scaling.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "retarget/autodiff.hpp"
#include "retarget/errors.hpp"
#include "retarget/ops.hpp"
#include "retarget/tensor.hpp"

namespace retarget::shift {

struct RetargetSpec {
  std::size_t source_width = 0;
  std::size_t source_height = 0;
  std::size_t target_width = 0;
  double lambda = 0.2;
  double gamma = 1.0;

  bool reducing() const noexcept { return target_width <= source_width; }
  double alpha() const noexcept {
    return std::abs(static_cast<double>(source_width) - static_cast<double>(target_width));
  }

  void validate() const {
    if (source_width < 1 || source_height < 1) throw SpecError("source dimensions must be >= 1");
    if (target_width < 1) throw SpecError("target width must be >= 1");
    if (lambda < 0) throw SpecError("lambda must be >= 0");
    if (!reducing() && !(gamma > 0)) throw SpecError("gamma must be > 0");
  }
};

enum class AttentionStage { decoder, resized, duplicated, combined };

struct AttentionMap {
  ad::Var values;  ///< [N,1,H,w]
  AttentionStage stage = AttentionStage::decoder;

  std::size_t height() const { return values.shape()[2]; }
  std::size_t width() const { return values.shape()[3]; }
};

/// Sub-pixel displacements S[N,1,H,w] in source pixels.
struct ShiftMap {
  ad::Var values;
  double alpha = 0.0;
  /// Largest admissible x + S (W - 1 for reduction, W' - 1 for enlarging).
  double coordinate_limit = 0.0;
};

inline constexpr double kMinRowTotal = 1e-9;
inline constexpr double kShiftTolerance = 1e-9;

namespace detail {

inline void expect_nchw1(const ad::Var& v, const char* what) {
  const auto& s = v.shape();
  if (s.size() != 4 || s[1] != 1) throw DimensionError(std::string(what) + " must be [N,1,H,W], got " + shape_str(s));
}

inline void expect_stage(const AttentionMap& a, AttentionStage stage, const char* what) {
  if (a.stage != stage) throw ContractError(std::string(what) + ": attention map is at the wrong stage");
}

}  // namespace detail

/// A_r: bilinear resize of the decoder map to H x W'.
inline AttentionMap resize_attention(const AttentionMap& a_d, const RetargetSpec& spec) {
  if (spec.target_width < 1) throw SpecError("target width must be >= 1");
  detail::expect_stage(a_d, AttentionStage::decoder, "resize_attention");
  detail::expect_nchw1(a_d.values, "decoder attention");
  return {ad::resize_bilinear(a_d.values, a_d.height(), spec.target_width), AttentionStage::resized};
}

/// A_1D: column-filter response of A_r, repeated over all H rows.
inline AttentionMap duplicate_conv(const AttentionMap& a_r, const ad::Var& w, const ad::Var& b) {
  detail::expect_stage(a_r, AttentionStage::resized, "duplicate_conv");
  detail::expect_nchw1(a_r.values, "resized attention");
  const ad::Var row = ad::conv1d_column(a_r.values, w, b);
  return {ad::broadcast_to(row, a_r.values.shape()), AttentionStage::duplicated};
}

/// A = lambda * A_r + A_1D. Rows whose total is not positive are rejected.
inline AttentionMap combine(const AttentionMap& a_r, const AttentionMap& a_1d, double lambda) {
  detail::expect_stage(a_r, AttentionStage::resized, "combine");
  detail::expect_stage(a_1d, AttentionStage::duplicated, "combine");
  if (a_r.values.shape() != a_1d.values.shape()) {
    throw DimensionError("combine: " + shape_str(a_r.values.shape()) + " vs " + shape_str(a_1d.values.shape()));
  }
  AttentionMap out{ad::add(ad::scale(a_r.values, lambda), a_1d.values), AttentionStage::combined};
  const auto& v = out.values.value().storage();
  const std::size_t w = out.width();
  for (std::size_t r = 0; r < v.size() / w; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < w; ++c) total += v[r * w + c];
    if (!(total > 0.0)) throw DegeneracyError("combined attention row " + std::to_string(r) + " has total <= 0");
  }
  return out;
}

/// Throws InvariantError unless 0 <= S <= alpha, S is nondecreasing along
/// each row and x + S stays within the coordinate limit.
inline void check_shift_map(const ShiftMap& s) {
  const auto& v = s.values.value().storage();
  const std::size_t w = s.values.shape()[3];
  for (std::size_t r = 0; r < v.size() / w; ++r) {
    for (std::size_t x = 0; x < w; ++x) {
      const double sv = v[r * w + x];
      if (!(sv >= -kShiftTolerance && sv <= s.alpha + kShiftTolerance)) {
        throw InvariantError("shift " + std::to_string(sv) + " outside [0, " + std::to_string(s.alpha) + "]");
      }
      if (x > 0 && sv < v[r * w + x - 1] - kShiftTolerance) throw InvariantError("shift map not monotone in x");
      if (static_cast<double>(x) + sv > s.coordinate_limit + kShiftTolerance) {
        throw InvariantError("sample coordinate beyond the source width");
      }
    }
  }
}

/// S = alpha * exclusive_prefix(A) / row_total, with alpha = |W - W'|.
inline ShiftMap cumulative_normalize(const AttentionMap& a, const RetargetSpec& spec) {
  detail::expect_nchw1(a.values, "attention");
  const auto& v = a.values.value().storage();
  const std::size_t w = a.width();
  for (std::size_t r = 0; r < v.size() / w; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < w; ++c) total += v[r * w + c];
    if (!(total >= kMinRowTotal)) {
      throw DegeneracyError("attention row " + std::to_string(r) + " total below " + std::to_string(kMinRowTotal));
    }
  }
  const ad::Var totals = ad::reduce(ad::ReduceKind::sum, a.values, {3});
  const ad::Var prefix = ad::cumsum_row_exclusive(a.values);
  ShiftMap s;
  s.alpha = spec.alpha();
  s.values = ad::scale(ad::div(prefix, totals), s.alpha);
  s.coordinate_limit = spec.reducing() ? static_cast<double>(spec.source_width) - 1.0
                                       : static_cast<double>(spec.target_width) - 1.0;
  check_shift_map(s);
  return s;
}

/// x + S(x, y): the fractional source column of every target pixel.
inline ad::Var source_coordinates(const ShiftMap& s) {
  const std::size_t w = s.values.shape()[3];
  Tensor grid({1, 1, 1, w});
  for (std::size_t x = 0; x < w; ++x) grid[x] = static_cast<double>(x);
  return ad::add(s.values, ad::constant(std::move(grid)));
}

/// O(x, y) = I(x + S(x, y), y) with two-tap linear interpolation.
inline ad::Var warp(const ad::Var& image, const ShiftMap& s) {
  return ad::sample_columns(image, source_coordinates(s));
}

/// exp(-A / gamma): strictly positive and order-reversing.
inline AttentionMap invert_attention(const AttentionMap& a, double gamma) {
  if (!(gamma > 0)) throw SpecError("gamma must be > 0");
  return {ad::exp(ad::scale(a.values, -1.0 / gamma)), a.stage};
}

/// Forward coordinates t(x') = x' + S(x') for enlarging, shape [N,1,H,W].
inline Tensor enlarging_coordinates(const AttentionMap& attention_on_input, const RetargetSpec& spec) {
  spec.validate();
  if (spec.reducing()) throw SpecError("enlarging needs a target width above the source width");
  if (attention_on_input.width() != spec.source_width) {
    throw DimensionError("enlarging attention must be on the input grid");
  }
  const AttentionMap inverted = invert_attention(attention_on_input, spec.gamma);
  const ShiftMap s = cumulative_normalize({ad::constant(inverted.values.value()), AttentionStage::combined}, spec);
  return source_coordinates(s).value();
}

/// Enlarges image[1,C,H,W] to W' columns by scattering input column x' to
/// t(x') and interpolating between bracketing pairs. Output columns past
/// t(W-1) repeat the last input column.
inline Tensor enlarge(const Tensor& image, const AttentionMap& attention_on_input, const RetargetSpec& spec) {
  if (image.rank() != 4) throw DimensionError("enlarge expects an NCHW image");
  const std::size_t n = image.dim(0), ch = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (w != spec.source_width || h != spec.source_height) throw DimensionError("image does not match the spec");
  if (spec.target_width == w) return image;
  const Tensor t = enlarging_coordinates(attention_on_input, spec);
  if (t.dim(0) != n || t.dim(2) != h) throw DimensionError("attention does not match the image");
  const std::size_t wo = spec.target_width;
  Tensor out({n, ch, h, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < h; ++y) {
      const double* tr = t.data().data() + (b * h + y) * w;
      for (std::size_t k = 0; k + 1 < w; ++k) {
        if (!(tr[k + 1] > tr[k])) throw InvariantError("forward mapping is not strictly increasing");
      }
      if (tr[0] < -kShiftTolerance || tr[w - 1] > static_cast<double>(wo - 1) + kShiftTolerance) {
        throw InvariantError("forward mapping leaves the target grid");
      }
      std::size_t k = 0;
      for (std::size_t x = 0; x < wo; ++x) {
        const double xd = static_cast<double>(x);
        while (k + 1 < w && tr[k + 1] <= xd) ++k;
        for (std::size_t c = 0; c < ch; ++c) {
          const double* row = image.data().data() + ((b * ch + c) * h + y) * w;
          double v;
          if (k + 1 >= w) {
            v = row[w - 1];
          } else {
            const double f = (xd - tr[k]) / (tr[k + 1] - tr[k]);
            v = row[k] + f * (row[k + 1] - row[k]);
          }
          out.at(b, c, y, x) = v;
        }
      }
    }
  return out;
}

}  // namespace retarget::shift
