// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>

#include "retarget/losses.hpp"
#include "retarget/pipeline.hpp"
#include "support.hpp"

using namespace retarget;
using Catch::Approx;
using rt_test::random_tensor;

namespace {

double elu(double v) { return v > 0 ? v : std::expm1(v); }

// Direct 3x3 same-padded convolution + ELU of one image.
std::vector<double> naive_conv_elu(const std::vector<double>& in, std::size_t cin, std::size_t h, std::size_t w,
                                   const Tensor& k, const Tensor& b) {
  const std::size_t cout = k.dim(0);
  std::vector<double> out(cout * h * w);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = b[o];
        for (std::size_t c = 0; c < cin; ++c)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
              acc += k.at(o, c, static_cast<std::size_t>(dy + 1), static_cast<std::size_t>(dx + 1)) *
                     in[(c * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
            }
        out[(o * h + y) * w + x] = elu(acc);
      }
  return out;
}

// F_1 and F_2 of image b of x, computed without the library's conv.
std::array<std::vector<double>, 2> naive_features(const nn::Model& cls, const Tensor& x, std::size_t b) {
  const std::size_t h = x.dim(2), w = x.dim(3);
  std::vector<double> in(3 * h * w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) in[(c * h + y) * w + xx] = x.at(b, c, y, xx) - nn::detail::kInputMean;
  const auto f1 = naive_conv_elu(in, 3, h, w, cls.param("L00.w").value(), cls.param("L00.b").value());
  const auto f2 = naive_conv_elu(f1, cls.layers[0].out, h, w, cls.param("L01.w").value(), cls.param("L01.b").value());
  return {f1, f2};
}

// E_s by explicit loops over j, images, channels, rows and columns.
double naive_structure_loss(const nn::Model& cls, const Tensor& src, const Tensor& out, const Tensor& shift) {
  const std::size_t n = src.dim(0), h = src.dim(2), w = src.dim(3), wo = out.dim(3);
  const std::size_t ch = cls.layers[0].out;
  double total = 0.0;
  std::array<double, 2> sums{0.0, 0.0};
  for (std::size_t b = 0; b < n; ++b) {
    const auto fs = naive_features(cls, src, b);
    const auto fo = naive_features(cls, out, b);
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < wo; ++x) {
            const double u = static_cast<double>(x) + shift.at(b, 0, y, x);
            std::size_t f = static_cast<std::size_t>(std::floor(u));
            if (f >= w - 1) f = w - 2;
            const double t = u - static_cast<double>(f);
            const double* row = fs[j].data() + (c * h + y) * w;
            const double sampled = (1 - t) * row[f] + t * row[f + 1];
            sums[j] += std::abs(fo[j][(c * h + y) * wo + x] - sampled);
          }
  }
  for (double s : sums) total += s / static_cast<double>(n * ch * h * wo);
  return total;
}

nn::Model tiny_classifier(std::uint64_t seed, std::size_t size) {
  std::mt19937_64 rng(seed);
  return nn::build_classifier(3, rng, {3, 4, 5}, size);
}

}  // namespace

TEST_CASE("pad_to_canvas", "[losses]") {
  const auto o = ad::constant(Tensor({1, 1, 1, 2}, std::vector<double>{5, 6}));
  CHECK(loss::pad_to_canvas(o, 4).value() == Tensor({1, 1, 1, 4}, std::vector<double>{0, 5, 6, 0}));
  CHECK(loss::pad_to_canvas(o, 5).value() == Tensor({1, 1, 1, 5}, std::vector<double>{0, 5, 6, 0, 0}));
  CHECK(loss::pad_to_canvas(o, 2).value() == o.value());
  CHECK_THROWS_AS(loss::pad_to_canvas(o, 1), ContractError);
  CHECK(loss::pad_to_canvas(o, 4, 0.25).value() == Tensor({1, 1, 1, 4}, std::vector<double>{0.25, 5, 6, 0.25}));
  CHECK(loss::pad_for_classifier(o, 4).value() ==
        Tensor({1, 1, 1, 4}, std::vector<double>{nn::detail::kInputMean, 5, 6, nn::detail::kInputMean}));
  std::mt19937_64 rng(1);
  const auto r = ad::constant(random_tensor({2, 3, 4, 5}, rng));
  CHECK(ad::sum(loss::pad_to_canvas(r, 9)).value().item() == Approx(ad::sum(r).value().item()).epsilon(1e-14));
}

TEST_CASE("content_loss examples", "[losses]") {
  const Tensor labels({1, 2}, std::vector<double>{1, 0});
  const auto z = ad::constant(Tensor({1, 2}, std::vector<double>{std::log(9.0), std::log(0.25)}));
  CHECK(loss::content_loss(z, labels).value().item() == Approx(0.16425).margin(1e-5));
  CHECK(loss::content_loss(z, labels).value().item() ==
        Approx(-0.5 * (std::log(0.9) + std::log(0.8))).epsilon(1e-12));

  const auto zero = ad::constant(Tensor({3, 4}, 0.0));
  CHECK(loss::content_loss(zero, Tensor({3, 4}, 1.0)).value().item() == Approx(std::log(2.0)).epsilon(1e-12));

  const auto saturated = ad::constant(Tensor({1, 2}, std::vector<double>{800, -800}));
  CHECK(loss::content_loss(saturated, labels).value().item() == Approx(0.0).margin(1e-300));
  const auto wrong = ad::constant(Tensor({1, 2}, std::vector<double>{-800, 800}));
  CHECK(std::isfinite(loss::content_loss(wrong, labels).value().item()));

  CHECK_THROWS_AS(loss::content_loss(zero, Tensor({3, 4}, 0.5)), ContractError);
  CHECK_THROWS_AS(loss::content_loss(zero, Tensor({3, 3}, 1.0)), DimensionError);
}

TEST_CASE("content_loss gradient", "[losses]") {
  std::mt19937_64 rng(2);
  for (int seed = 0; seed < 20; ++seed) {
    auto z = ad::parameter(random_tensor({3, 4}, rng, -3, 3));
    Tensor labels({3, 4});
    for (auto& v : labels.storage()) v = (rng() & 1) ? 1.0 : 0.0;
    const auto rep = rt_test::check_gradients([&] { return loss::content_loss(z, labels); }, {z});
    CHECK(rep.worst < 1e-5);
  }
}

TEST_CASE("structure_loss identity and constant images", "[losses]") {
  const auto cls = tiny_classifier(3, 16);
  std::mt19937_64 rng(4);
  const auto img = ad::constant(random_tensor({1, 3, 16, 16}, rng, 0, 1));
  const shift::ShiftMap zero{ad::constant(Tensor({1, 1, 16, 16}, 0.0)), 0, 15};
  CHECK(loss::structure_loss(img, img, zero, cls).value().item() == 0.0);

  // Constant colour: features are constant away from the border, so only
  // border pixels can contribute.
  const Tensor flat({1, 3, 16, 16}, 0.3);
  const Tensor out({1, 3, 16, 10}, 0.3);
  Tensor s({1, 1, 16, 10});
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 10; ++x) s.at(0, 0, y, x) = 0.6 * static_cast<double>(x);
  const auto fs = nn::low_level_features(cls, ad::constant(flat));
  const auto fo = nn::low_level_features(cls, ad::constant(out));
  const auto coords = shift::source_coordinates({ad::constant(s), 6, 15});
  for (std::size_t j = 0; j < 2; ++j) {
    const Tensor sampled = ad::sample_columns(fs[j], coords).value();
    const Tensor& o = fo[j].value();
    for (std::size_t c = 0; c < o.dim(1); ++c)
      for (std::size_t y = 2; y + 2 < 16; ++y)
        for (std::size_t x = 2; x + 2 < 10; ++x) CHECK(o.at(0, c, y, x) == Approx(sampled.at(0, c, y, x)).margin(1e-12));
  }
}

TEST_CASE("structure_loss equals the naive loop formula", "[losses]") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto cls = tiny_classifier(10 + trial, 16);
    const Tensor src = random_tensor({2, 3, 16, 16}, rng, 0, 1);
    const std::size_t tw = 9 + trial;
    const auto a = shift::AttentionMap{ad::constant(random_tensor({2, 1, 16, tw}, rng, 0.05, 1)),
                                       shift::AttentionStage::combined};
    const auto s = shift::cumulative_normalize(a, {16, 16, tw});
    const auto out = shift::warp(ad::constant(src), s);
    const double lib = loss::structure_loss(ad::constant(src), out, s, cls).value().item();
    const double ref = naive_structure_loss(cls, src, out.value(), s.values.value());
    CHECK(lib == Approx(ref).margin(1e-12));
    CHECK(lib > 0.0);
  }
}

TEST_CASE("structure_loss shape mismatch", "[losses]") {
  const auto cls = tiny_classifier(6, 16);
  const auto src = ad::constant(Tensor({1, 3, 16, 16}, 0.5));
  const auto out = ad::constant(Tensor({1, 3, 16, 8}, 0.5));
  const shift::ShiftMap s{ad::constant(Tensor({1, 1, 16, 7}, 0.0)), 8, 15};
  CHECK_THROWS_AS(loss::structure_loss(src, out, s, cls), DimensionError);
}

TEST_CASE("loss gradients reach the decoder and the column filter", "[losses]") {
  std::mt19937_64 rng(7);
  const auto cls = tiny_classifier(8, 16);
  for (int seed = 0; seed < 4; ++seed) {
    auto m = nn::build_encoder_decoder(cls, rng);
    const Tensor x = random_tensor({1, 3, 16, 16}, rng, 0, 1);
    const Tensor y({1, 3}, std::vector<double>{1, 0, 1});
    std::vector<ad::Var> params;
    for (const auto& name : m.trainable()) params.push_back(m.params.at(name));
    auto f = [&] {
      const auto pass = shift::retarget_forward(m, ad::constant(x), 11, 0.2, true);
      const auto logits = nn::classify(cls, loss::pad_to_canvas(pass.output, 16), false).logits;
      return ad::add(loss::content_loss(logits, y), loss::structure_loss(ad::constant(x), pass.output, pass.shift, cls));
    };
    const auto rep = rt_test::check_gradients(f, params, 1e-6, 3);
    INFO(rep.where);
    CHECK(rep.worst < 1e-4);
  }
}

TEST_CASE("loss report JSON", "[losses]") {
  const loss::LossReport r{0.5, 0.25, 0.75, 1.0};
  const auto j = loss::to_json(r);
  CHECK(j.at("E_c") == 0.5);
  CHECK(j.at("E_s") == 0.25);
  CHECK(j.at("total") == 0.75);
  CHECK(j.at("w_s") == 1.0);
}
