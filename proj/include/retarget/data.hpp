// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

// RGB images, PNG I/O and the synthetic multi-label shapes dataset.

#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retarget/errors.hpp"
#include "retarget/tensor.hpp"

namespace retarget::data {

/// 8-bit interleaved RGB image.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  ///< height * width * 3

  Image() = default;
  Image(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0) {
    if (h < 1 || w < 1) throw ContractError("image dimensions must be >= 1");
  }
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
  friend bool operator==(const Image&, const Image&) = default;
};

/// u8 v -> v / 255 as a [1,3,H,W] tensor.
inline Tensor to_tensor(const Image& img) {
  Tensor t({1, 3, img.height, img.width});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) t.at(0, c, y, x) = img.at(y, x, c) / 255.0;
  return t;
}

/// Inverse of to_tensor: clamps to [0,1] and rounds half away from zero.
inline Image from_tensor(const Tensor& t, std::size_t batch = 0) {
  if (t.rank() != 4 || t.dim(1) != 3) throw DimensionError("expected [N,3,H,W] image tensor, got " + shape_str(t.shape()));
  Image img(t.dim(2), t.dim(3));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        const double v = std::clamp(t.at(batch, c, y, x), 0.0, 1.0) * 255.0;
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v));
      }
  return img;
}

// ---------------------------------------------------------------------------
// PNG

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngRaw {
  std::size_t height = 0, width = 0, channels = 0, bit_depth = 0;
  std::vector<std::uint8_t> bytes;  ///< rows of width * channels samples, big-endian for 16-bit
};

/// Reads any PNG after palette/low-bit-gray expansion. Throws FormatError on
/// malformed input. Nothing with a destructor is created after setjmp.
inline PngRaw read_png_raw(const std::string& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw FormatError(path + " is not a PNG");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw FormatError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FormatError("libpng init failed");
  }
  PngRaw raw;
  std::vector<png_bytep> rows;
  volatile bool ok = false;
  if (setjmp(png_jmpbuf(png)) == 0) {
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_read_update_info(png, info);
    raw.width = png_get_image_width(png, info);
    raw.height = png_get_image_height(png, info);
    raw.channels = png_get_channels(png, info);
    raw.bit_depth = static_cast<std::size_t>(png_get_bit_depth(png, info));
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    raw.bytes.resize(rowbytes * raw.height);
    rows.resize(raw.height);
    for (std::size_t y = 0; y < raw.height; ++y) rows[y] = raw.bytes.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    ok = true;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) throw FormatError("corrupt PNG: " + path);
  return raw;
}

/// Writes 8- or 16-bit samples (16-bit given as big-endian byte pairs).
inline void write_png_raw(const std::string& path, const std::uint8_t* bytes, std::size_t height, std::size_t width,
                          int color_type, int bit_depth, std::size_t channels) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng init failed");
  }
  std::vector<png_bytep> rows(height);
  volatile bool ok = false;
  const std::size_t rowbytes = width * channels * static_cast<std::size_t>(bit_depth / 8);
  for (std::size_t y = 0; y < height; ++y) rows[y] = const_cast<png_bytep>(bytes + y * rowbytes);
  if (setjmp(png_jmpbuf(png)) == 0) {
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    ok = true;
  }
  png_destroy_write_struct(&png, &info);
  if (!ok) throw IoError("failed writing PNG " + path);
}

}  // namespace detail

/// Loads an 8-bit PNG as RGB. Gray is replicated to three channels and any
/// alpha channel is dropped; 16-bit files are rejected.
inline Image load_png(const std::string& path) {
  const auto raw = detail::read_png_raw(path);
  if (raw.bit_depth != 8) throw FormatError(path + ": unsupported bit depth " + std::to_string(raw.bit_depth));
  Image img(raw.height, raw.width);
  for (std::size_t y = 0; y < raw.height; ++y)
    for (std::size_t x = 0; x < raw.width; ++x) {
      const std::uint8_t* px = raw.bytes.data() + (y * raw.width + x) * raw.channels;
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = raw.channels >= 3 ? px[c] : px[0];
    }
  return img;
}

inline void save_png(const Image& img, const std::string& path) {
  detail::write_png_raw(path, img.pixels.data(), img.height, img.width, PNG_COLOR_TYPE_RGB, 8, 3);
}

/// Writes a [H,W] (or [1,1,H,W]) map with values in [0,1] as 8- or 16-bit gray.
inline void save_gray_png(const Tensor& map, const std::string& path, int bits = 8) {
  if (bits != 8 && bits != 16) throw FormatError("gray PNG must be 8 or 16 bit");
  const std::size_t h = map.dim(map.rank() - 2), w = map.dim(map.rank() - 1);
  if (map.size() != h * w) throw DimensionError("gray PNG export needs a single-plane map");
  const double top = bits == 8 ? 255.0 : 65535.0;
  std::vector<std::uint8_t> bytes(h * w * static_cast<std::size_t>(bits / 8));
  for (std::size_t i = 0; i < h * w; ++i) {
    const auto v = static_cast<std::uint32_t>(std::lround(std::clamp(map[i], 0.0, 1.0) * top));
    if (bits == 8) {
      bytes[i] = static_cast<std::uint8_t>(v);
    } else {
      bytes[2 * i] = static_cast<std::uint8_t>(v >> 8);
      bytes[2 * i + 1] = static_cast<std::uint8_t>(v & 0xff);
    }
  }
  detail::write_png_raw(path, bytes.data(), h, w, PNG_COLOR_TYPE_GRAY, bits, 1);
}

/// Reads an 8- or 16-bit gray PNG as a [1,1,H,W] map in [0,1].
inline Tensor load_gray_png(const std::string& path) {
  const auto raw = detail::read_png_raw(path);
  if (raw.channels != 1) throw FormatError(path + " is not a single-channel PNG");
  Tensor t({1, 1, raw.height, raw.width});
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (raw.bit_depth == 16) {
      t[i] = ((raw.bytes[2 * i] << 8) | raw.bytes[2 * i + 1]) / 65535.0;
    } else {
      t[i] = raw.bytes[i] / 255.0;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class ShapeKind : int { circle = 0, square = 1, triangle = 2, cross = 3 };
inline const std::array<std::string, 4> kClassNames = {"circle", "square", "triangle", "cross"};

struct DatasetConfig {
  std::size_t count = 2000;
  std::size_t size = 64;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 2;
  std::uint64_t seed = 1;
  /// Lattice cells per side of the low-frequency background noise.
  std::size_t noise_cells = 4;
  /// Amplitude of the lattice noise and of the per-pixel jitter.
  int noise_amplitude = 48;
  int jitter = 8;

  void validate() const {
    if (count < 1) throw ConfigError("dataset count must be >= 1");
    if (size < 32) throw ConfigError("dataset image size must be >= 32");
    if (min_shapes < 1 || max_shapes < min_shapes) throw ConfigError("bad shapes-per-image range");
  }
};

/// One rendered shape as recorded by the generator.
struct Placement {
  ShapeKind kind{};
  long cx8 = 0, cy8 = 0;  ///< centre in 1/8 pixel units
  long half8 = 0;         ///< half extent in 1/8 pixel units
  int angle = 0;          ///< multiples of 15 degrees
  std::array<int, 3> color{};
  std::size_t visible_pixels = 0;
};

struct Sample {
  std::string id;
  Image image;
  std::vector<int> labels;
  std::vector<Placement> placements;
};

namespace detail {

inline constexpr std::array<std::array<long, 2>, 24> kRotation = {{
    {4096, 0},      {3956, 1060},   {3547, 2048},   {2896, 2896},   {2048, 3547},   {1060, 3956},
    {0, 4096},      {-1060, 3956},  {-2048, 3547},  {-2896, 2896},  {-3547, 2048},  {-3956, 1060},
    {-4096, 0},     {-3956, -1060}, {-3547, -2048}, {-2896, -2896}, {-2048, -3547}, {-1060, -3956},
    {0, -4096},     {1060, -3956},  {2048, -3547},  {2896, -2896},  {3547, -2048},  {3956, -1060},
}};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Unbiased integer in [0, n) from the raw 64-bit engine output.
inline std::uint64_t below(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % n;
}

inline long between(std::mt19937_64& rng, long lo, long hi) {
  return lo + static_cast<long>(below(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

/// Point-in-shape test in rotated local coordinates (1/8 px * 4096 scale).
inline bool inside(const Placement& p, long px8, long py8) {
  const long dx = px8 - p.cx8, dy = py8 - p.cy8;
  const auto& r = kRotation[static_cast<std::size_t>(p.angle)];
  const long lx = dx * r[0] + dy * r[1];
  const long ly = -dx * r[1] + dy * r[0];
  const long h = p.half8 * 4096;
  switch (p.kind) {
    case ShapeKind::circle: {
      const __int128 d = static_cast<__int128>(lx) * lx + static_cast<__int128>(ly) * ly;
      return d <= static_cast<__int128>(h) * h;
    }
    case ShapeKind::square: return std::abs(lx) <= h * 4 / 5 && std::abs(ly) <= h * 4 / 5;
    case ShapeKind::triangle: return ly <= h && 2 * std::abs(lx) <= ly + h;
    case ShapeKind::cross: {
      const long t = h / 3;
      return (std::abs(lx) <= t && std::abs(ly) <= h) || (std::abs(ly) <= t && std::abs(lx) <= h);
    }
  }
  return false;
}

/// Coverage 0..4 of pixel (x, y) from a 2x2 sub-sample grid.
inline int coverage(const Placement& p, std::size_t x, std::size_t y) {
  int k = 0;
  for (long sy : {2L, 6L})
    for (long sx : {2L, 6L}) k += inside(p, static_cast<long>(x) * 8 + sx, static_cast<long>(y) * 8 + sy) ? 1 : 0;
  return k;
}

inline void render_background(Image& img, std::mt19937_64& rng, const DatasetConfig& cfg, std::array<int, 3>& base) {
  const long n = static_cast<long>(cfg.size);
  const long cells = static_cast<long>(cfg.noise_cells);
  for (auto& b : base) b = static_cast<int>(between(rng, 50, 205));
  std::vector<std::array<long, 3>> lattice(static_cast<std::size_t>((cells + 1) * (cells + 1)));
  for (auto& node : lattice)
    for (auto& v : node) v = between(rng, -cfg.noise_amplitude, cfg.noise_amplitude);
  const long span = n - 1;
  for (long y = 0; y < n; ++y)
    for (long x = 0; x < n; ++x) {
      // Lattice position in 1/span units.
      const long gx = x * cells, gy = y * cells;
      const long ix = std::min(gx / span, cells - 1), iy = std::min(gy / span, cells - 1);
      const long fx = gx - ix * span, fy = gy - iy * span;
      for (std::size_t c = 0; c < 3; ++c) {
        const long v00 = lattice[static_cast<std::size_t>(iy * (cells + 1) + ix)][c];
        const long v01 = lattice[static_cast<std::size_t>(iy * (cells + 1) + ix + 1)][c];
        const long v10 = lattice[static_cast<std::size_t>((iy + 1) * (cells + 1) + ix)][c];
        const long v11 = lattice[static_cast<std::size_t>((iy + 1) * (cells + 1) + ix + 1)][c];
        const long top = v00 * (span - fx) + v01 * fx;
        const long bot = v10 * (span - fx) + v11 * fx;
        const long noise = (top * (span - fy) + bot * fy) / (span * span);
        const long j = between(rng, -cfg.jitter, cfg.jitter);
        img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) =
            static_cast<std::uint8_t>(std::clamp(base[c] + noise + j, 0L, 255L));
      }
    }
}

inline std::array<int, 3> contrasting_color(std::mt19937_64& rng, const std::array<int, 3>& base) {
  std::array<int, 3> col{};
  for (int attempt = 0; attempt < 256; ++attempt) {
    for (auto& c : col) c = static_cast<int>(between(rng, 0, 255));
    int dist = 0;
    for (std::size_t c = 0; c < 3; ++c) dist += std::abs(col[c] - base[c]);
    if (dist >= 240) return col;
  }
  for (std::size_t c = 0; c < 3; ++c) col[c] = base[c] < 128 ? 255 : 0;
  return col;
}

}  // namespace detail

inline std::string sample_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "s%05zu", index);
  return buf;
}

/// Deterministic sample `index` of the dataset; the RNG stream depends only
/// on (seed, index), so samples can be produced independently.
inline Sample generate_sample(const DatasetConfig& cfg, std::size_t index) {
  std::mt19937_64 rng(detail::splitmix64(cfg.seed * 0x100000001b3ULL + index));
  Sample s;
  s.id = sample_id(index);
  s.image = Image(cfg.size, cfg.size);
  s.labels.assign(kClassNames.size(), 0);
  std::array<int, 3> base{};
  detail::render_background(s.image, rng, cfg, base);

  const long n8 = static_cast<long>(cfg.size) * 8;
  const std::size_t shapes = static_cast<std::size_t>(
      detail::between(rng, static_cast<long>(cfg.min_shapes), static_cast<long>(cfg.max_shapes)));
  // Minimum visible area (pixels) for a shape to count as present.
  const std::size_t min_visible = cfg.size * cfg.size / 200;
  for (std::size_t k = 0; k < shapes; ++k) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      Placement p;
      p.kind = static_cast<ShapeKind>(detail::below(rng, kClassNames.size()));
      // Full extent 12-40% of the width.
      const long extent8 = n8 * detail::between(rng, 12, 40) / 100;
      p.half8 = extent8 / 2;
      p.cx8 = detail::between(rng, p.half8 + 4, n8 - p.half8 - 4);
      p.cy8 = detail::between(rng, p.half8 + 4, n8 - p.half8 - 4);
      p.angle = static_cast<int>(detail::below(rng, 24));
      p.color = detail::contrasting_color(rng, base);
      bool clear = true;
      for (const auto& q : s.placements) {
        const long dx = p.cx8 - q.cx8, dy = p.cy8 - q.cy8;
        const long need = (p.half8 + q.half8) * 3 / 4;
        if (dx * dx + dy * dy < need * need) clear = false;
      }
      if (!clear) continue;
      s.placements.push_back(p);
      break;
    }
  }
  // Paint in order; track the topmost shape per pixel.
  std::vector<int> owner(cfg.size * cfg.size, -1);
  for (std::size_t k = 0; k < s.placements.size(); ++k) {
    const auto& p = s.placements[k];
    for (std::size_t y = 0; y < cfg.size; ++y)
      for (std::size_t x = 0; x < cfg.size; ++x) {
        const int cov = detail::coverage(p, x, y);
        if (cov == 0) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          auto& px = s.image.at(y, x, c);
          px = static_cast<std::uint8_t>((px * (4 - cov) + p.color[c] * cov + 2) / 4);
        }
        if (cov >= 2) owner[y * cfg.size + x] = static_cast<int>(k);
      }
  }
  for (int o : owner) {
    if (o >= 0) ++s.placements[static_cast<std::size_t>(o)].visible_pixels;
  }
  for (const auto& p : s.placements) {
    if (p.visible_pixels >= min_visible) s.labels[static_cast<std::size_t>(p.kind)] = 1;
  }
  if (std::all_of(s.labels.begin(), s.labels.end(), [](int v) { return v == 0; })) {
    // Unreachable for sizes >= 32 since a lone shape is never occluded.
    throw InvariantError("sample " + s.id + " has no visible shape");
  }
  return s;
}

/// Fixed 80/20 split: every fifth sample goes to evaluation.
inline bool is_eval_index(std::size_t index) { return index % 5 == 4; }

struct Dataset {
  std::vector<std::string> classes;
  std::vector<Sample> samples;
  std::vector<std::size_t> train;  ///< indices into samples
  std::vector<std::size_t> eval;

  std::size_t num_classes() const { return classes.size(); }
};

struct Manifest {
  nlohmann::json json;
};

inline Manifest generate_dataset(const DatasetConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw IoError("cannot create directory " + out_dir);
  nlohmann::json samples = nlohmann::json::array();
  nlohmann::json train = nlohmann::json::array(), eval = nlohmann::json::array();
  for (std::size_t i = 0; i < cfg.count; ++i) {
    const Sample s = generate_sample(cfg, i);
    const std::string file = s.id + ".png";
    save_png(s.image, (std::filesystem::path(out_dir) / file).string());
    samples.push_back({{"id", s.id}, {"file", file}, {"labels", s.labels}});
    (is_eval_index(i) ? eval : train).push_back(s.id);
  }
  Manifest m;
  m.json = {{"classes", kClassNames},
            {"samples", samples},
            {"split", {{"train", train}, {"eval", eval}}},
            {"config", {{"count", cfg.count}, {"size", cfg.size}, {"seed", cfg.seed}}}};
  const auto path = (std::filesystem::path(out_dir) / "manifest.json").string();
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << m.json.dump(1) << '\n';
  return m;
}

/// In-memory dataset without touching the filesystem.
inline Dataset make_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.classes.assign(kClassNames.begin(), kClassNames.end());
  for (std::size_t i = 0; i < cfg.count; ++i) {
    d.samples.push_back(generate_sample(cfg, i));
    (is_eval_index(i) ? d.eval : d.train).push_back(i);
  }
  return d;
}

inline Dataset load_dataset(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / "manifest.json";
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad manifest: " + std::string(e.what()));
  }
  Dataset d;
  try {
    d.classes = j.at("classes").get<std::vector<std::string>>();
    std::map<std::string, std::size_t> index;
    for (const auto& s : j.at("samples")) {
      Sample sample;
      sample.id = s.at("id").get<std::string>();
      sample.labels = s.at("labels").get<std::vector<int>>();
      if (sample.labels.size() != d.classes.size()) throw FormatError("label length mismatch for " + sample.id);
      sample.image = load_png((std::filesystem::path(dir) / s.at("file").get<std::string>()).string());
      index[sample.id] = d.samples.size();
      d.samples.push_back(std::move(sample));
    }
    for (const auto& id : j.at("split").at("train")) d.train.push_back(index.at(id.get<std::string>()));
    for (const auto& id : j.at("split").at("eval")) d.eval.push_back(index.at(id.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad manifest: " + std::string(e.what()));
  } catch (const std::out_of_range& e) {
    throw FormatError("manifest split refers to an unknown sample");
  }
  return d;
}

/// Stacks the images of `indices` into [N,3,H,W] and their labels into [N,C].
inline std::pair<Tensor, Tensor> make_batch(const Dataset& d, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("empty batch");
  const auto& first = d.samples[indices.front()].image;
  const std::size_t h = first.height, w = first.width, c = d.num_classes();
  Tensor x({indices.size(), 3, h, w});
  Tensor y({indices.size(), c});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& s = d.samples[indices[b]];
    if (s.image.height != h || s.image.width != w) throw DimensionError("batch images differ in size");
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t yy = 0; yy < h; ++yy)
        for (std::size_t xx = 0; xx < w; ++xx) x.at(b, ch, yy, xx) = s.image.at(yy, xx, ch) / 255.0;
    for (std::size_t k = 0; k < c; ++k) y[b * c + k] = s.labels[k];
  }
  return {std::move(x), std::move(y)};
}

}  // namespace retarget::data
