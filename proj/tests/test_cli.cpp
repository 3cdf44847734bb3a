// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>

#include "retarget/data.hpp"
#include "retarget/eval.hpp"
#include "support.hpp"

using namespace retarget;
namespace fs = std::filesystem;

namespace {

int cli(const std::string& args) {
  const std::string cmd = std::string(RETARGET_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

fs::path sample_png(const fs::path& dir) {
  data::DatasetConfig cfg;
  cfg.size = 48;
  const auto s = data::generate_sample(cfg, 3);
  const auto path = dir / "in.png";
  data::save_png(s.image, path.string());
  return path;
}

}  // namespace

TEST_CASE("usage errors exit 1", "[cli]") {
  CHECK(cli("") == 1);
  CHECK(cli("bogus") == 1);
  CHECK(cli("retarget --input a.png --output b.png --width 3 --no-such-flag") == 1);
  CHECK(cli("baseline --input a.png") == 1);
  CHECK(cli("--help") == 0);
  CHECK(cli("retarget --help") == 0);
}

TEST_CASE("runtime errors exit 2", "[cli]") {
  const auto dir = rt_test::temp_dir("cli_err");
  const auto in = sample_png(dir);
  CHECK(cli("retarget --input " + q(dir / "missing.png") + " --output " + q(dir / "o.png") + " --width 10") == 2);
  CHECK(cli("retarget --input " + q(in) + " --output " + q(dir / "o.png") + " --width 10 --checkpoint " +
            q(dir / "none.rtck")) == 2);
  CHECK(cli("retarget --input " + q(in) + " --output " + q(dir / "o.png") + " --width 10 --ratio 0.5") == 2);
  CHECK(cli("baseline --input " + q(in) + " --output " + q(dir / "o.png") + " --method magic --width 10") == 2);
  std::ofstream(dir / "cfg.json") << R"({"data": {"colour": 3}})";
  CHECK(cli("--config " + q(dir / "cfg.json") + " gen-data --out " + q(dir / "d")) == 2);
}

TEST_CASE("retarget at ratio 1 copies the input", "[cli]") {
  const auto dir = rt_test::temp_dir("cli_identity");
  const auto in = sample_png(dir);
  REQUIRE(cli("retarget --input " + q(in) + " --output " + q(dir / "same.png") + " --ratio 1.0") == 0);
  CHECK(slurp(dir / "same.png") == slurp(in));
  CHECK(data::load_png((dir / "same.png").string()) == data::load_png(in.string()));
}

TEST_CASE("retarget, enlarge and baseline output sizes", "[cli]") {
  const auto dir = rt_test::temp_dir("cli_sizes");
  const auto in = sample_png(dir);
  REQUIRE(cli("retarget --input " + q(in) + " --output " + q(dir / "w.png") + " --width 20 --dump-attention " +
              q(dir / "a.png") + " --dump-shift " + q(dir / "s.rtft")) == 0);
  const auto w = data::load_png((dir / "w.png").string());
  CHECK(w.width == 20);
  CHECK(w.height == 48);
  const Tensor a = data::load_gray_png((dir / "a.png").string());
  CHECK(a.shape() == Shape{1, 1, 48, 48});
  CHECK(load_tensor((dir / "s.rtft").string()).shape() == Shape{1, 1, 48, 20});

  REQUIRE(cli("retarget --input " + q(in) + " --output " + q(dir / "h.png") + " --height 30") == 0);
  const auto h = data::load_png((dir / "h.png").string());
  CHECK(h.width == 48);
  CHECK(h.height == 30);

  REQUIRE(cli("retarget --input " + q(in) + " --output " + q(dir / "r.png") + " --ratio 0.5") == 0);
  CHECK(data::load_png((dir / "r.png").string()).width == 24);

  for (double k : {1.5, 1.7}) {
    REQUIRE(cli("enlarge --input " + q(in) + " --output " + q(dir / "e.png") + " --factor " + std::to_string(k)) == 0);
    CHECK(data::load_png((dir / "e.png").string()).width == static_cast<std::size_t>(std::lround(k * 48)));
  }

  for (const char* m : {"seam", "linear", "center", "edge"}) {
    REQUIRE(cli("baseline --input " + q(in) + " --output " + q(dir / "b.png") + " --method " + m + " --width 31") == 0);
    const auto b = data::load_png((dir / "b.png").string());
    CHECK(b.width == 31);
    CHECK(b.height == 48);
  }

  REQUIRE(cli("anim --input " + q(in) + " --out " + q(dir / "anim")) == 0);
  std::size_t frames = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir / "anim")) ++frames;
  CHECK(frames == 7);
  CHECK(data::load_png((dir / "anim" / "frame_000.png").string()).width == 43);
  CHECK(data::load_png((dir / "anim" / "frame_006.png").string()).width == 14);
}

TEST_CASE("data, training and evaluation commands", "[cli]") {
  const auto dir = rt_test::temp_dir("cli_pipeline");
  std::ofstream(dir / "cfg.json") << R"({
    "data": {"count": 20, "size": 32},
    "pretrain": {"epochs": 1, "widths": [4, 6, 8]},
    "train": {"epochs": 1},
    "eval": {"scales": [0.5]}
  })";
  const std::string cfg = "--config " + q(dir / "cfg.json") + " --seed 3 ";
  REQUIRE(cli(cfg + "gen-data --out " + q(dir / "data")) == 0);
  CHECK(data::load_dataset((dir / "data").string()).samples.size() == 20);
  REQUIRE(cli(cfg + "pretrain --data " + q(dir / "data") + " --out " + q(dir / "cls.rtck") + " --log " +
              q(dir / "pre.jsonl")) == 0);
  REQUIRE(cli(cfg + "train --data " + q(dir / "data") + " --classifier " + q(dir / "cls.rtck") + " --out " +
              q(dir / "ret.rtck") + " --log " + q(dir / "train.jsonl")) == 0);
  REQUIRE(cli(cfg + "eval --data " + q(dir / "data") + " --checkpoint " + q(dir / "ret.rtck") + " --classifier " +
              q(dir / "cls.rtck") + " --out " + q(dir / "eval.json") + " --csv " + q(dir / "eval.csv")) == 0);
  const auto report = eval::EvalReport::from_json(nlohmann::json::parse(slurp(dir / "eval.json")));
  CHECK(report.scales == std::vector<double>{0.5});
  CHECK(report.methods.size() == 5);
  CHECK(report.meta.contains("retargeter_id"));
  CHECK(report.meta.contains("classifier_id"));
  CHECK(fs::file_size(dir / "eval.csv") > 0);

  const auto m = nn::load_checkpoint((dir / "ret.rtck").string());
  CHECK(m.kind == nn::ModelKind::retargeter);
  REQUIRE(cli("retarget --input " + q(dir / "data" / "s00000.png") + " --output " + q(dir / "o.png") +
              " --width 12 --checkpoint " + q(dir / "ret.rtck")) == 0);
  CHECK(data::load_png((dir / "o.png").string()).width == 12);

  CHECK(cli(cfg + "eval --data " + q(dir / "data") + " --checkpoint " + q(dir / "nope.rtck") + " --classifier " +
            q(dir / "cls.rtck") + " --out " + q(dir / "e2.json")) == 2);
}
