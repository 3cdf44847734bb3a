// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

// Linear scaling, center/edge cropping and seam carving on [N,3,H,W] tensors
// (batch 0 is used where a single image is implied).

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "retarget/autodiff.hpp"
#include "retarget/errors.hpp"
#include "retarget/ops.hpp"
#include "retarget/tensor.hpp"

namespace retarget::baseline {

/// |dL/dx| + |dL/dy| of luminance with forward differences; the last
/// column/row repeats its neighbour so its difference is zero.
struct EnergyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

struct Seam {
  std::vector<std::size_t> cols;  ///< one column per row
};

struct SeamResult {
  Seam seam;
  double cost = 0.0;
};

inline void expect_image(const Tensor& img) {
  if (img.rank() != 4 || img.dim(1) != 3) throw DimensionError("expected [N,3,H,W], got " + shape_str(img.shape()));
}

inline EnergyMap energy_map(const Tensor& img) {
  expect_image(img);
  const std::size_t h = img.dim(2), w = img.dim(3);
  std::vector<double> lum(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      lum[y * w + x] = 0.299 * img.at(0, 0, y, x) + 0.587 * img.at(0, 1, y, x) + 0.114 * img.at(0, 2, y, x);
  EnergyMap e{h, w, std::vector<double>(h * w)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double l = lum[y * w + x];
      const double dx = x + 1 < w ? lum[y * w + x + 1] - l : 0.0;
      const double dy = y + 1 < h ? lum[(y + 1) * w + x] - l : 0.0;
      e.values[y * w + x] = std::abs(dx) + std::abs(dy);
    }
  return e;
}

/// Horizontal bilinear resample to `target_width` (half-pixel centres).
inline Tensor linear_scale(const Tensor& img, std::size_t target_width) {
  if (target_width < 1) throw SpecError("target width must be >= 1");
  if (img.rank() != 4) throw DimensionError("expected NCHW image");
  return ad::resize_bilinear(ad::constant(img), img.dim(2), target_width).value();
}

inline Tensor crop_columns(const Tensor& img, std::size_t offset, std::size_t width) {
  const std::size_t n = img.dim(0), c = img.dim(1), h = img.dim(2);
  Tensor out({n, c, h, width});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < width; ++x) out.at(b, k, y, x) = img.at(b, k, y, offset + x);
  return out;
}

inline void expect_crop(const Tensor& img, std::size_t target_width) {
  expect_image(img);
  if (target_width < 1) throw SpecError("target width must be >= 1");
  if (target_width > img.dim(3)) throw ContractError("crop width exceeds image width");
}

inline std::size_t center_crop_offset(std::size_t width, std::size_t target_width) {
  return (width - target_width) / 2;
}

inline Tensor center_crop(const Tensor& img, std::size_t target_width) {
  expect_crop(img, target_width);
  return crop_columns(img, center_crop_offset(img.dim(3), target_width), target_width);
}

/// Offset of the `target_width`-wide window with the largest energy; the
/// leftmost window wins ties.
inline std::size_t edge_crop_offset(const EnergyMap& e, std::size_t target_width) {
  if (target_width < 1 || target_width > e.width) throw ContractError("window wider than the energy map");
  std::vector<long double> prefix(e.width + 1, 0.0L);
  for (std::size_t x = 0; x < e.width; ++x) {
    long double col = 0.0L;
    for (std::size_t y = 0; y < e.height; ++y) col += e.at(y, x);
    prefix[x + 1] = prefix[x] + col;
  }
  const long double tol = 1e-12L * std::max(1.0L, prefix[e.width]);
  std::size_t best = 0;
  long double best_sum = prefix[target_width];
  for (std::size_t o = 1; o + target_width <= e.width; ++o) {
    const long double s = prefix[o + target_width] - prefix[o];
    if (s > best_sum + tol) {
      best_sum = s;
      best = o;
    }
  }
  return best;
}

inline Tensor edge_crop(const Tensor& img, std::size_t target_width) {
  expect_crop(img, target_width);
  return crop_columns(img, edge_crop_offset(energy_map(img), target_width), target_width);
}

/// Minimum-cost 8-connected vertical seam by dynamic programming:
/// M(r,c) = E(r,c) + min(M(r-1,c-1), M(r-1,c), M(r-1,c+1)).
/// Ties go to the smallest column, both at the bottom row and while
/// backtracking.
inline SeamResult find_seam(const EnergyMap& e) {
  const std::size_t h = e.height, w = e.width;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> m(h * w);
  for (std::size_t x = 0; x < w; ++x) m[x] = e.at(0, x);
  for (std::size_t y = 1; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double left = x > 0 ? m[(y - 1) * w + x - 1] : inf;
      const double up = m[(y - 1) * w + x];
      const double right = x + 1 < w ? m[(y - 1) * w + x + 1] : inf;
      m[y * w + x] = e.at(y, x) + std::min({left, up, right});
    }
  SeamResult r;
  r.seam.cols.resize(h);
  std::size_t col = 0;
  for (std::size_t x = 1; x < w; ++x) {
    if (m[(h - 1) * w + x] < m[(h - 1) * w + col]) col = x;
  }
  r.cost = m[(h - 1) * w + col];
  r.seam.cols[h - 1] = col;
  for (std::size_t y = h - 1; y-- > 0;) {
    const std::size_t lo = col > 0 ? col - 1 : 0;
    const std::size_t hi = std::min(col + 1, w - 1);
    std::size_t best = lo;
    for (std::size_t x = lo + 1; x <= hi; ++x) {
      if (m[y * w + x] < m[y * w + best]) best = x;
    }
    col = best;
    r.seam.cols[y] = col;
  }
  return r;
}

inline Tensor remove_seam(const Tensor& img, const Seam& seam) {
  const std::size_t n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
  if (seam.cols.size() != h) throw DimensionError("seam length does not match image height");
  if (w < 2) throw ContractError("cannot remove a seam from a one-column image");
  Tensor out({n, c, h, w - 1});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < h; ++y) {
        std::size_t o = 0;
        for (std::size_t x = 0; x < w; ++x) {
          if (x == seam.cols[y]) continue;
          out.at(b, k, y, o++) = img.at(b, k, y, x);
        }
      }
  return out;
}

/// Removes W - W' seams, recomputing the energy after every removal.
inline Tensor seam_carve(const Tensor& img, std::size_t target_width) {
  if (target_width < 1) throw SpecError("target width must be >= 1");
  expect_crop(img, target_width);
  Tensor cur = img;
  while (cur.dim(3) > target_width) cur = remove_seam(cur, find_seam(energy_map(cur)).seam);
  return cur;
}

enum class Method { linear, center_crop, edge_crop, seam_carve };

inline Method parse_method(const std::string& name) {
  if (name == "linear") return Method::linear;
  if (name == "center" || name == "center_crop") return Method::center_crop;
  if (name == "edge" || name == "edge_crop") return Method::edge_crop;
  if (name == "seam" || name == "seam_carve") return Method::seam_carve;
  throw ConfigError("unknown baseline method '" + name + "'");
}

inline Tensor apply(Method method, const Tensor& img, std::size_t target_width) {
  switch (method) {
    case Method::linear: return linear_scale(img, target_width);
    case Method::center_crop: return center_crop(img, target_width);
    case Method::edge_crop: return edge_crop(img, target_width);
    case Method::seam_carve: return seam_carve(img, target_width);
  }
  throw ConfigError("unknown baseline method");
}

}  // namespace retarget::baseline
