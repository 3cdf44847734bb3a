// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <functional>
#include <limits>

#include "retarget/baselines.hpp"
#include "support.hpp"

using namespace retarget;
using namespace retarget::baseline;
using Catch::Approx;
using rt_test::random_tensor;

namespace {

EnergyMap energy_of(std::size_t h, std::size_t w, std::vector<double> v) { return {h, w, std::move(v)}; }

// Minimum cost over every 8-connected top-to-bottom path.
double brute_force_seam(const EnergyMap& e) {
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t y, std::size_t x, double acc) {
    acc += e.at(y, x);
    if (y + 1 == e.height) {
      best = std::min(best, acc);
      return;
    }
    for (long d = -1; d <= 1; ++d) {
      const long nx = static_cast<long>(x) + d;
      if (nx >= 0 && nx < static_cast<long>(e.width)) walk(y + 1, static_cast<std::size_t>(nx), acc);
    }
  };
  for (std::size_t x = 0; x < e.width; ++x) walk(0, x, 0.0);
  return best;
}

double window_sum(const EnergyMap& e, std::size_t offset, std::size_t width) {
  double s = 0.0;
  for (std::size_t y = 0; y < e.height; ++y)
    for (std::size_t x = offset; x < offset + width; ++x) s += e.at(y, x);
  return s;
}

Tensor gray_image(std::size_t h, std::size_t w, const std::vector<double>& lum) {
  Tensor t({1, 3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) t[c * h * w + i] = lum[i];
  return t;
}

}  // namespace

TEST_CASE("energy map", "[baselines]") {
  const Tensor img = gray_image(2, 3, {0.0, 0.5, 0.25, 1.0, 1.0, 1.0});
  const auto e = energy_map(img);
  CHECK(e.at(0, 0) == Approx(0.5 + 1.0));
  CHECK(e.at(0, 1) == Approx(0.25 + 0.5));
  CHECK(e.at(0, 2) == Approx(0.0 + 0.75));
  CHECK(e.at(1, 0) == Approx(0.0).margin(1e-15));
  CHECK(e.at(1, 2) == 0.0);
  std::mt19937_64 rng(1);
  for (double v : energy_map(random_tensor({1, 3, 6, 9}, rng, 0, 1)).values) CHECK(v >= 0.0);
}

TEST_CASE("linear scaling", "[baselines]") {
  std::mt19937_64 rng(2);
  const Tensor img = random_tensor({1, 3, 4, 6}, rng, 0, 1);
  CHECK(linear_scale(img, 6) == img);
  const Tensor flat({1, 3, 4, 6}, 0.3);
  for (double v : linear_scale(flat, 11).data()) CHECK(v == Approx(0.3).epsilon(1e-14));
  const Tensor row({1, 1, 1, 4}, std::vector<double>{10, 20, 30, 40});
  CHECK(linear_scale(row, 2) == Tensor({1, 1, 1, 2}, std::vector<double>{15, 35}));
  CHECK_THROWS_AS(linear_scale(img, 0), SpecError);
}

TEST_CASE("seam DP hand example", "[baselines]") {
  const auto e = energy_of(3, 3, {1, 2, 3, 4, 1, 6, 7, 8, 1});
  const auto r = find_seam(e);
  CHECK(r.cost == 3.0);
  CHECK(r.seam.cols == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("seam DP matches exhaustive enumeration", "[baselines]") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(2, 6);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t h = dim(rng), w = dim(rng);
    const Tensor img = random_tensor({1, 3, h, w}, rng, 0, 1);
    const auto e = energy_map(img);
    const auto r = find_seam(e);
    CHECK(r.cost == Approx(brute_force_seam(e)).margin(1e-12));
    double along = 0.0;
    for (std::size_t y = 0; y < h; ++y) {
      along += e.at(y, r.seam.cols[y]);
      CHECK(r.seam.cols[y] < w);
      if (y > 0) CHECK(std::abs(static_cast<long>(r.seam.cols[y]) - static_cast<long>(r.seam.cols[y - 1])) <= 1);
    }
    CHECK(along == Approx(r.cost).margin(1e-12));
  }
}

TEST_CASE("seam ties and removal", "[baselines]") {
  const Tensor flat({1, 3, 4, 5}, 0.5);
  CHECK(find_seam(energy_map(flat)).seam.cols == std::vector<std::size_t>{0, 0, 0, 0});

  std::mt19937_64 rng(4);
  const Tensor img = random_tensor({1, 3, 6, 8}, rng, 0, 1);
  const auto seam = find_seam(energy_map(img)).seam;
  const Tensor cut = remove_seam(img, seam);
  CHECK(cut.shape() == Shape{1, 3, 6, 7});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 7; ++x) CHECK(cut.at(0, c, y, x) == img.at(0, c, y, x < seam.cols[y] ? x : x + 1));

  const Tensor carved = seam_carve(img, 3);
  CHECK(carved.shape() == Shape{1, 3, 6, 3});
  CHECK(seam_carve(img, 8) == img);
  CHECK_THROWS_AS(seam_carve(img, 0), SpecError);
  CHECK_THROWS_AS(seam_carve(img, 9), ContractError);
}

TEST_CASE("center and edge crops", "[baselines]") {
  std::mt19937_64 rng(5);
  const Tensor flat({1, 3, 4, 9}, 0.2);
  CHECK(edge_crop_offset(energy_map(flat), 4) == 0);
  CHECK(center_crop_offset(9, 4) == 2);
  CHECK(center_crop_offset(8, 3) == 2);
  const Tensor img = random_tensor({1, 3, 4, 9}, rng, 0, 1);
  CHECK(center_crop(img, 4) == crop_columns(img, 2, 4));

  // Texture only in the leftmost columns.
  Tensor left({1, 3, 4, 9}, 0.5);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 3; ++x) left.at(0, c, y, x) = ((x + y) % 2) ? 0.0 : 1.0;
  CHECK(edge_crop_offset(energy_map(left), 3) == 0);

  for (int trial = 0; trial < 200; ++trial) {
    EnergyMap e{3, 8, {}};
    for (std::size_t i = 0; i < 24; ++i) e.values.push_back(std::uniform_real_distribution<double>(0, 1)(rng));
    std::size_t best = 0;
    for (std::size_t o = 1; o <= 4; ++o)
      if (window_sum(e, o, 4) > window_sum(e, best, 4)) best = o;
    CHECK(edge_crop_offset(e, 4) == best);
    CHECK(window_sum(e, edge_crop_offset(e, 4), 4) >= window_sum(e, center_crop_offset(8, 4), 4));
  }
  CHECK_THROWS_AS(center_crop(img, 10), ContractError);
  CHECK_THROWS_AS(edge_crop(img, 10), ContractError);
  CHECK_THROWS_AS(center_crop(img, 0), SpecError);
}

TEST_CASE("method dispatch", "[baselines]") {
  std::mt19937_64 rng(6);
  const Tensor img = random_tensor({1, 3, 5, 10}, rng, 0, 1);
  for (const char* m : {"linear", "center", "edge", "seam", "center_crop", "edge_crop", "seam_carve"})
    CHECK(apply(parse_method(m), img, 6).dim(3) == 6);
  CHECK_THROWS_AS(parse_method("magic"), ConfigError);
}
