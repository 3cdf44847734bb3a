// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

// Spatial differentiable operations on NCHW tensors.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "retarget/autodiff.hpp"

namespace retarget::ad {

enum class Padding { valid, same };

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using ConstMapRow = Eigen::Map<const RowMat>;

struct ConvGeom {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad_h, pad_w, oh, ow;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return oh * ow; }
};

inline void im2col(const double* x, const ConvGeom& g, double* col) {
  const std::size_t p = g.p();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = col + ((c * g.kh + i) * g.kw + j) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad_h);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad_w);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
}

inline void col2im(const double* col, const ConvGeom& g, double* x) {
  const std::size_t p = g.p();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((c * g.kh + i) * g.kw + j) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad_h);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad_w);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

struct Bilinear1D {
  std::vector<std::size_t> i0, i1;
  std::vector<double> frac;
};

/// Half-pixel (align-corners false) sample table mapping `out` positions onto `in`.
inline Bilinear1D bilinear_table(std::size_t in, std::size_t out) {
  Bilinear1D t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    auto lo = static_cast<std::size_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    t.i0[o] = lo;
    t.i1[o] = std::min(lo + 1, in - 1);
    t.frac[o] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

/// Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw] plus bias b[Cout].
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride = 1, Padding pad = Padding::same) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4) throw DimensionError("conv2d expects 4-D input and kernel");
  if (xs[1] != ws[1]) {
    throw DimensionError("conv2d channel mismatch: input " + shape_str(xs) + ", kernel " + shape_str(ws));
  }
  if (b.value().rank() != 1 || b.shape()[0] != ws[0]) throw DimensionError("conv2d bias must be [Cout]");
  if (ws[2] % 2 == 0 || ws[3] % 2 == 0) throw ContractError("conv2d kernel extents must be odd");
  if (stride < 1) throw ContractError("conv2d stride must be >= 1");

  detail::ConvGeom g{};
  g.n = xs[0];
  g.cin = xs[1];
  g.h = xs[2];
  g.w = xs[3];
  g.cout = ws[0];
  g.kh = ws[2];
  g.kw = ws[3];
  g.stride = stride;
  g.pad_h = pad == Padding::same ? g.kh / 2 : 0;
  g.pad_w = pad == Padding::same ? g.kw / 2 : 0;
  if (g.h + 2 * g.pad_h < g.kh || g.w + 2 * g.pad_w < g.kw) throw DimensionError("conv2d input smaller than kernel");
  g.oh = (g.h + 2 * g.pad_h - g.kh) / stride + 1;
  g.ow = (g.w + 2 * g.pad_w - g.kw) / stride + 1;

  const std::size_t k = g.k(), p = g.p();
  const bool keep_cols = w.requires_grad();
  auto cols = std::make_shared<std::vector<double>>(keep_cols ? g.n * k * p : k * p);

  Tensor out({g.n, g.cout, g.oh, g.ow});
  detail::ConstMapRow wm(w.value().data().data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(k));
  const auto& bv = b.value().storage();
  for (std::size_t n = 0; n < g.n; ++n) {
    double* col = cols->data() + (keep_cols ? n * k * p : 0);
    detail::im2col(x.value().data().data() + n * g.cin * g.h * g.w, g, col);
    detail::ConstMapRow cm(col, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
    detail::MapRow om(out.data().data() + n * g.cout * p, static_cast<Eigen::Index>(g.cout),
                      static_cast<Eigen::Index>(p));
    om.noalias() = wm * cm;
    for (std::size_t c = 0; c < g.cout; ++c) om.row(static_cast<Eigen::Index>(c)).array() += bv[c];
  }
  if (!keep_cols) cols.reset();

  return detail::make_result(std::move(out), {x, w, b}, [g, cols](Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const std::size_t k = g.k(), p = g.p();
    const double* gout = self.grad.data().data();
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer().storage();
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t c = 0; c < g.cout; ++c) {
          const double* r = gout + (n * g.cout + c) * p;
          double acc = 0.0;
          for (std::size_t i = 0; i < p; ++i) acc += r[i];
          gb[c] += acc;
        }
    }
    if (pw.requires_grad) {
      detail::MapRow gw(pw.grad_buffer().data().data(), static_cast<Eigen::Index>(g.cout),
                        static_cast<Eigen::Index>(k));
      for (std::size_t n = 0; n < g.n; ++n) {
        detail::ConstMapRow go(gout + n * g.cout * p, static_cast<Eigen::Index>(g.cout),
                               static_cast<Eigen::Index>(p));
        detail::ConstMapRow cm(cols->data() + n * k * p, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
        gw.noalias() += go * cm.transpose();
      }
    }
    if (px.requires_grad) {
      detail::ConstMapRow wm(pw.value.data().data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(k));
      std::vector<double> dcol(k * p);
      double* gx = px.grad_buffer().data().data();
      for (std::size_t n = 0; n < g.n; ++n) {
        detail::ConstMapRow go(gout + n * g.cout * p, static_cast<Eigen::Index>(g.cout),
                               static_cast<Eigen::Index>(p));
        detail::MapRow dm(dcol.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
        dm.noalias() = wm.transpose() * go;
        detail::col2im(dcol.data(), g, gx + n * g.cin * g.h * g.w);
      }
    }
  });
}

/// Collapses the row axis with a learned column filter: x[..., H, W'] and
/// w[H] give out[..., 1, W'] with out[c] = sum_r w[r] x[r, c] + b.
inline Var conv1d_column(const Var& x, const Var& w, const Var& b) {
  const auto& xs = x.shape();
  if (xs.size() < 2) throw DimensionError("conv1d_column expects at least [H, W]");
  const std::size_t h = xs[xs.size() - 2], wd = xs.back();
  if (w.value().rank() != 1 || w.shape()[0] != h) {
    throw DimensionError("conv1d_column filter length " + shape_str(w.shape()) + " does not match height " +
                         std::to_string(h));
  }
  if (b.value().size() != 1) throw DimensionError("conv1d_column bias must be a scalar");
  const std::size_t batches = x.value().size() / (h * wd);
  Shape out_shape = xs;
  out_shape[out_shape.size() - 2] = 1;
  Tensor out(out_shape);
  const auto& xv = x.value().storage();
  const auto& wv = w.value().storage();
  const double bias = b.value()[0];
  for (std::size_t n = 0; n < batches; ++n)
    for (std::size_t c = 0; c < wd; ++c) {
      double acc = bias;
      for (std::size_t r = 0; r < h; ++r) acc += wv[r] * xv[(n * h + r) * wd + c];
      out[n * wd + c] = acc;
    }
  return detail::make_result(std::move(out), {x, w, b}, [h, wd, batches](Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto& g = self.grad.storage();
    if (px.requires_grad) {
      auto& gx = px.grad_buffer().storage();
      const auto& wv = pw.value.storage();
      for (std::size_t n = 0; n < batches; ++n)
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t c = 0; c < wd; ++c) gx[(n * h + r) * wd + c] += g[n * wd + c] * wv[r];
    }
    if (pw.requires_grad) {
      auto& gw = pw.grad_buffer().storage();
      const auto& xv = px.value.storage();
      for (std::size_t n = 0; n < batches; ++n)
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t c = 0; c < wd; ++c) gw[r] += g[n * wd + c] * xv[(n * h + r) * wd + c];
    }
    if (pb.requires_grad) {
      double acc = 0.0;
      for (double v : g) acc += v;
      pb.grad_buffer()[0] += acc;
    }
  });
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Ties route the gradient to the first maximum in scan order.
inline Var maxpool2(const Var& x) {
  const auto& xs = x.shape();
  if (xs.size() != 4) throw DimensionError("maxpool2 expects NCHW input");
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  if (h < 2 || w < 2) throw DimensionError("maxpool2 input smaller than 2x2");
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({xs[0], xs[1], oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& xv = x.value().storage();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = pl * h * w + (2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = pl * h * w + (2 * i + di) * w + 2 * j + dj;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (pl * oh + i) * ow + j;
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
  return detail::make_result(std::move(out), {x}, [argmax](Node& self) {
    auto& gx = self.parents[0]->grad_buffer().storage();
    const auto& g = self.grad.storage();
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*argmax)[o]] += g[o];
  });
}

/// Separable bilinear resize of the last two axes with half-pixel centres.
inline Var resize_bilinear(const Var& x, std::size_t out_h, std::size_t out_w) {
  const auto& xs = x.shape();
  if (xs.size() < 2) throw DimensionError("resize_bilinear expects at least [H, W]");
  if (out_h < 1 || out_w < 1) throw DimensionError("resize_bilinear to zero-size output");
  const std::size_t h = xs[xs.size() - 2], w = xs.back();
  const std::size_t planes = x.value().size() / (h * w);
  auto ty = detail::bilinear_table(h, out_h);
  auto tx = detail::bilinear_table(w, out_w);
  Shape out_shape = xs;
  out_shape[out_shape.size() - 2] = out_h;
  out_shape.back() = out_w;
  Tensor out(out_shape);
  const auto& xv = x.value().storage();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = xv.data() + pl * h * w;
    double* dst = out.data().data() + pl * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const double fy = ty.frac[i];
      const double* r0 = src + ty.i0[i] * w;
      const double* r1 = src + ty.i1[i] * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const double fx = tx.frac[j];
        const double top = r0[tx.i0[j]] + fx * (r0[tx.i1[j]] - r0[tx.i0[j]]);
        const double bot = r1[tx.i0[j]] + fx * (r1[tx.i1[j]] - r1[tx.i0[j]]);
        dst[i * out_w + j] = top + fy * (bot - top);
      }
    }
  }
  return detail::make_result(std::move(out), {x}, [ty, tx, h, w, planes, out_h, out_w](Node& self) {
    auto& gx = self.parents[0]->grad_buffer().storage();
    const auto& g = self.grad.storage();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      double* dst = gx.data() + pl * h * w;
      const double* src = g.data() + pl * out_h * out_w;
      for (std::size_t i = 0; i < out_h; ++i) {
        const double fy = ty.frac[i];
        for (std::size_t j = 0; j < out_w; ++j) {
          const double fx = tx.frac[j];
          const double gv = src[i * out_w + j];
          dst[ty.i0[i] * w + tx.i0[j]] += gv * (1 - fy) * (1 - fx);
          dst[ty.i0[i] * w + tx.i1[j]] += gv * (1 - fy) * fx;
          dst[ty.i1[i] * w + tx.i0[j]] += gv * fy * (1 - fx);
          dst[ty.i1[i] * w + tx.i1[j]] += gv * fy * fx;
        }
      }
    }
  });
}

/// Mean over the spatial axes: [N,C,H,W] -> [N,C].
inline Var global_avg_pool(const Var& x) {
  const auto& xs = x.shape();
  if (xs.size() != 4) throw DimensionError("global_avg_pool expects NCHW input");
  return reshape(reduce(ReduceKind::mean, x, {2, 3}), {xs[0], xs[1]});
}

/// Horizontal slack allowed on sample coordinates before they count as out of range.
inline constexpr double kSampleSlack = 1e-9;

/// Samples x[N,C,H,W] along each row at fractional columns u[N,1,H,W'] with
/// a two-tap linear stencil: out(n,c,y,j) = x(n,c,y,u) interpolated.
/// At integer u the right-sided stencil is used (except at the last column).
/// Differentiable in x and u.
inline Var sample_columns(const Var& x, const Var& u) {
  const auto& xs = x.shape();
  const auto& us = u.shape();
  if (xs.size() != 4 || us.size() != 4 || us[1] != 1 || us[0] != xs[0] || us[2] != xs[2]) {
    throw DimensionError("sample_columns: incompatible shapes " + shape_str(xs) + " and " + shape_str(us));
  }
  const std::size_t n = xs[0], ch = xs[1], h = xs[2], w = xs[3], wo = us[3];
  const auto& uv = u.value().storage();
  auto lo = std::make_shared<std::vector<std::size_t>>(uv.size());
  auto fr = std::make_shared<std::vector<double>>(uv.size());
  const double last = static_cast<double>(w - 1);
  for (std::size_t i = 0; i < uv.size(); ++i) {
    const double c = uv[i];
    if (!(c >= -kSampleSlack && c <= last + kSampleSlack)) {
      throw InvariantError("sample coordinate " + std::to_string(c) + " outside [0, " + std::to_string(w - 1) + "]");
    }
    const double cc = std::clamp(c, 0.0, last);
    std::size_t f = static_cast<std::size_t>(std::floor(cc));
    if (w == 1) {
      f = 0;
    } else if (f >= w - 1) {
      f = w - 2;
    }
    (*lo)[i] = f;
    (*fr)[i] = w == 1 ? 0.0 : cc - static_cast<double>(f);
  }
  Tensor out({n, ch, h, wo});
  const auto& xv = x.value().storage();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t y = 0; y < h; ++y) {
        const double* row = xv.data() + ((b * ch + c) * h + y) * w;
        double* dst = out.data().data() + ((b * ch + c) * h + y) * wo;
        const std::size_t ub = (b * h + y) * wo;
        for (std::size_t j = 0; j < wo; ++j) {
          const std::size_t f = (*lo)[ub + j];
          const double t = (*fr)[ub + j];
          const double a = row[f];
          const double r = w == 1 ? a : row[f + 1];
          dst[j] = (1.0 - t) * a + t * r;
        }
      }
  return detail::make_result(std::move(out), {x, u}, [lo, fr, n, ch, h, w, wo](Node& self) {
    auto& px = *self.parents[0];
    auto& pu = *self.parents[1];
    const auto& g = self.grad.storage();
    const auto& xv = px.value.storage();
    if (px.requires_grad) {
      auto& gx = px.grad_buffer().storage();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t y = 0; y < h; ++y) {
            double* row = gx.data() + ((b * ch + c) * h + y) * w;
            const double* src = g.data() + ((b * ch + c) * h + y) * wo;
            const std::size_t ub = (b * h + y) * wo;
            for (std::size_t j = 0; j < wo; ++j) {
              const std::size_t f = (*lo)[ub + j];
              const double t = (*fr)[ub + j];
              if (w == 1) {
                row[0] += src[j];
                continue;
              }
              row[f] += src[j] * (1 - t);
              row[f + 1] += src[j] * t;
            }
          }
    }
    if (pu.requires_grad && w > 1) {
      auto& gu = pu.grad_buffer().storage();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t y = 0; y < h; ++y) {
            const double* row = xv.data() + ((b * ch + c) * h + y) * w;
            const double* src = g.data() + ((b * ch + c) * h + y) * wo;
            const std::size_t ub = (b * h + y) * wo;
            for (std::size_t j = 0; j < wo; ++j) {
              const std::size_t f = (*lo)[ub + j];
              gu[ub + j] += src[j] * (row[f + 1] - row[f]);
            }
          }
    }
  });
}

/// Places x[N,C,H,W'] into a zero canvas of width `width`, starting at column `left`.
inline Var pad_columns(const Var& x, std::size_t width, std::size_t left) {
  const auto& xs = x.shape();
  if (xs.size() != 4) throw DimensionError("pad_columns expects NCHW input");
  const std::size_t rows = xs[0] * xs[1] * xs[2], w = xs[3];
  if (left + w > width) throw ContractError("pad_columns: content wider than canvas");
  Tensor out({xs[0], xs[1], xs[2], width});
  const auto& xv = x.value().storage();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.data() + r * w, w, out.data().data() + r * width + left);
  return detail::make_result(std::move(out), {x}, [rows, w, width, left](Node& self) {
    auto& gx = self.parents[0]->grad_buffer().storage();
    const auto& g = self.grad.storage();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) gx[r * w + j] += g[r * width + left + j];
  });
}

}  // namespace retarget::ad
