// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

// Helpers shared by the unit and acceptance tests: random tensors, a
// central-difference gradient checker and naive reference implementations.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "retarget/autodiff.hpp"
#include "retarget/networks.hpp"
#include "retarget/ops.hpp"
#include "retarget/shift_layer.hpp"
#include "retarget/tensor.hpp"

namespace rt_test {

using retarget::Shape;
using retarget::Tensor;
namespace ad = retarget::ad;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

/// sum(v * R) for a fixed random R, so every output element carries a
/// distinct weight into the scalar under test.
inline ad::Var weighted_sum(const ad::Var& v, const Tensor& weights) {
  return ad::sum(ad::mul(v, ad::constant(weights)));
}

struct GradReport {
  double worst = 0.0;       ///< largest relative error seen
  std::size_t checked = 0;  ///< number of scalar entries compared
  std::string where;        ///< parameter and index of the worst entry
};

/// Relative error with a floor on the scale: near-zero gradients are
/// compared in absolute terms against the floor.
inline double rel_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward() of f() against central differences for every entry
/// of every Var in `params` (or every `stride`-th entry).
inline GradReport check_gradients(const std::function<ad::Var()>& f, const std::vector<ad::Var>& params,
                                  double h = 1e-6, std::size_t stride = 1) {
  for (auto p : params) p.zero_grad();
  ad::backward(f());
  std::vector<Tensor> analytic;
  for (const auto& p : params) analytic.push_back(p.grad());
  GradReport r;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    auto& v = p.mutable_value().storage();
    for (std::size_t i = 0; i < v.size(); i += stride) {
      const double orig = v[i];
      v[i] = orig + h;
      const double up = f().value().item();
      v[i] = orig - h;
      const double down = f().value().item();
      v[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double e = rel_error(analytic[k][i], numeric);
      ++r.checked;
      if (e > r.worst) {
        r.worst = e;
        r.where = "param " + std::to_string(k) + " entry " + std::to_string(i);
      }
    }
  }
  return r;
}

/// Random strictly positive attention [N,1,H,W] in [lo, hi].
inline Tensor random_attention(std::size_t n, std::size_t h, std::size_t w, std::mt19937_64& rng, double lo = 0.05,
                               double hi = 1.0) {
  return random_tensor({n, 1, h, w}, rng, lo, hi);
}

/// Direct per-pixel linear interpolation of row `y` of channel `c` at u.
inline double sample_naive(const Tensor& x, std::size_t b, std::size_t c, std::size_t y, double u) {
  const std::size_t w = x.dim(3);
  const double fl = std::floor(u);
  std::size_t f = static_cast<std::size_t>(std::max(0.0, fl));
  if (f >= w - 1) f = w - 2;
  const double t = u - static_cast<double>(f);
  return (1 - t) * x.at(b, c, y, f) + t * x.at(b, c, y, f + 1);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("retarget_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace rt_test
