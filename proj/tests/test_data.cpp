// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <fstream>
#include <iterator>

#include "retarget/data.hpp"
#include "support.hpp"

using namespace retarget;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("generation is deterministic", "[data]") {
  data::DatasetConfig cfg;
  cfg.count = 10;
  cfg.seed = 7;
  const auto a = rt_test::temp_dir("gen_a"), b = rt_test::temp_dir("gen_b");
  data::generate_dataset(cfg, a.string());
  data::generate_dataset(cfg, b.string());
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    ++files;
    CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
  }
  CHECK(files == 11);

  // Samples depend only on (seed, index).
  cfg.count = 3;
  const auto d = data::make_dataset(cfg);
  CHECK(d.samples[2].image == data::generate_sample(cfg, 2).image);
  cfg.seed = 8;
  CHECK_FALSE(d.samples[2].image == data::generate_sample(cfg, 2).image);
}

TEST_CASE("labels agree with the placement log", "[data]") {
  data::DatasetConfig cfg;
  cfg.count = 300;
  cfg.seed = 3;
  const std::size_t min_visible = cfg.size * cfg.size / 200;
  for (std::size_t i = 0; i < cfg.count; ++i) {
    const auto s = data::generate_sample(cfg, i);
    REQUIRE(s.image.height == cfg.size);
    REQUIRE(s.image.width == cfg.size);
    CHECK(s.placements.size() >= 1);
    CHECK(s.placements.size() <= 2);
    for (std::size_t k = 0; k < 4; ++k) {
      bool present = false;
      for (const auto& p : s.placements) {
        present = present || (static_cast<std::size_t>(p.kind) == k && p.visible_pixels >= min_visible);
        // Extent between 12% and 40% of the width.
        CHECK(2 * p.half8 >= static_cast<long>(cfg.size) * 8 * 12 / 100 - 1);
        CHECK(2 * p.half8 <= static_cast<long>(cfg.size) * 8 * 40 / 100);
      }
      CHECK(present == (s.labels[k] == 1));
    }
    // Each visible shape was actually painted in its own colour somewhere.
    for (const auto& p : s.placements) {
      if (p.visible_pixels < min_visible) continue;
      bool painted = false;
      for (std::size_t y = 0; y < cfg.size && !painted; ++y)
        for (std::size_t x = 0; x < cfg.size && !painted; ++x) {
          if (data::detail::coverage(p, x, y) == 4) {
            painted = s.image.at(y, x, 0) == p.color[0] && s.image.at(y, x, 1) == p.color[1] &&
                      s.image.at(y, x, 2) == p.color[2];
          }
        }
      CHECK(painted);
    }
  }
}

TEST_CASE("class frequency is near uniform", "[data]") {
  data::DatasetConfig cfg;
  cfg.count = 2000;
  cfg.seed = 1;
  const auto d = data::make_dataset(cfg);
  std::array<double, 4> counts{};
  for (const auto& s : d.samples)
    for (std::size_t k = 0; k < 4; ++k) counts[k] += s.labels[k];
  const double mean = (counts[0] + counts[1] + counts[2] + counts[3]) / 4.0;
  for (double c : counts) {
    INFO(c << " vs mean " << mean);
    CHECK(std::abs(c - mean) <= 0.1 * mean);
  }
  CHECK(d.train.size() == 1600);
  CHECK(d.eval.size() == 400);
  for (std::size_t i : d.eval) CHECK(i % 5 == 4);
}

TEST_CASE("dataset config validation", "[data]") {
  data::DatasetConfig cfg;
  cfg.count = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.count = 1;
  cfg.size = 31;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.size = 32;
  CHECK_NOTHROW(cfg.validate());
  CHECK_THROWS_AS(data::generate_dataset(cfg, "/proc/definitely/not/writable"), IoError);
}

TEST_CASE("PNG round trip and promotion", "[data][io]") {
  const auto dir = rt_test::temp_dir("png");
  data::Image img(5, 7);
  std::mt19937_64 rng(1);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() & 0xff);
  data::save_png(img, (dir / "rgb.png").string());
  CHECK(data::load_png((dir / "rgb.png").string()) == img);

  Tensor gray({1, 1, 3, 4});
  for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = static_cast<double>(i * 20) / 255.0;
  data::save_gray_png(gray, (dir / "g8.png").string(), 8);
  const auto promoted = data::load_png((dir / "g8.png").string());
  REQUIRE(promoted.height == 3);
  REQUIRE(promoted.width == 4);
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t c = 0; c < 3; ++c) CHECK(promoted.at(y, x, c) == (y * 4 + x) * 20);

  data::save_gray_png(gray, (dir / "g16.png").string(), 16);
  CHECK_THROWS_AS(data::load_png((dir / "g16.png").string()), FormatError);

  std::ofstream((dir / "junk.png").string()) << "not a png at all";
  CHECK_THROWS_AS(data::load_png((dir / "junk.png").string()), FormatError);
  const std::string good = slurp(dir / "rgb.png");
  std::ofstream((dir / "cut.png").string(), std::ios::binary) << good.substr(0, good.size() / 2);
  CHECK_THROWS_AS(data::load_png((dir / "cut.png").string()), FormatError);
  CHECK_THROWS_AS(data::load_png((dir / "missing.png").string()), IoError);
}

TEST_CASE("tensor conversion", "[data]") {
  data::Image img(1, 2);
  img.pixels = {0, 128, 255, 1, 2, 3};
  const Tensor t = data::to_tensor(img);
  CHECK(t.at(0, 0, 0, 0) == 0.0);
  CHECK(t.at(0, 1, 0, 0) == 128.0 / 255.0);
  CHECK(t.at(0, 2, 0, 0) == 1.0);
  CHECK(data::from_tensor(t) == img);
  Tensor half({1, 3, 1, 1}, std::vector<double>{0.5 / 255.0, 1.5 / 255.0, 2.0});
  const auto r = data::from_tensor(half);
  CHECK(r.at(0, 0, 0) == 1);
  CHECK(r.at(0, 0, 1) == 2);
  CHECK(r.at(0, 0, 2) == 255);
  CHECK_THROWS_AS(data::Image(0, 3), ContractError);
}

TEST_CASE("manifest and loading", "[data][io]") {
  data::DatasetConfig cfg;
  cfg.count = 12;
  cfg.seed = 5;
  const auto dir = rt_test::temp_dir("manifest");
  const auto m = data::generate_dataset(cfg, dir.string());
  CHECK(m.json.at("classes").size() == 4);
  CHECK(m.json.at("samples").size() == 12);
  CHECK(m.json.at("split").at("eval").size() == 2);

  const auto loaded = data::load_dataset(dir.string());
  const auto mem = data::make_dataset(cfg);
  REQUIRE(loaded.samples.size() == mem.samples.size());
  for (std::size_t i = 0; i < mem.samples.size(); ++i) {
    CHECK(loaded.samples[i].id == mem.samples[i].id);
    CHECK(loaded.samples[i].image == mem.samples[i].image);
    CHECK(loaded.samples[i].labels == mem.samples[i].labels);
  }
  CHECK(loaded.train == mem.train);
  CHECK(loaded.eval == mem.eval);

  const auto [x, y] = data::make_batch(loaded, {0, 3});
  CHECK(x.shape() == Shape{2, 3, 64, 64});
  CHECK(y.shape() == Shape{2, 4});
  CHECK(x.at(1, 2, 5, 6) == loaded.samples[3].image.at(5, 6, 2) / 255.0);
  CHECK_THROWS_AS(data::make_batch(loaded, {}), ContractError);

  std::ofstream(dir / "manifest.json") << "{\"classes\": [\"a\"], \"samples\": 3}";
  CHECK_THROWS_AS(data::load_dataset(dir.string()), FormatError);
  CHECK_THROWS_AS(data::load_dataset((dir / "nowhere").string()), IoError);
}
