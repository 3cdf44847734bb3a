// Copyright 2026 The retarget Authors
// SPDX-License-Identifier: Apache-2.0

// Average precision, batched scoring and the mAP-ratio experiment: how much
// of a classifier's mAP survives when images are narrowed by each method and
// linearly stretched back to their original width.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retarget/baselines.hpp"
#include "retarget/data.hpp"
#include "retarget/networks.hpp"
#include "retarget/pipeline.hpp"

namespace retarget::eval {

/// Mean over positives of precision at each positive, ranking by descending
/// score with ties kept in input order. nullopt when there is no positive.
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double acc = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] != 0) {
      ++hits;
      acc += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return acc / static_cast<double>(hits);
}

/// Mean AP over classes of scores[N,C] against labels[N,C]; classes without
/// positives are skipped.
inline double mean_average_precision(const Tensor& scores, const Tensor& labels) {
  if (scores.shape() != labels.shape() || scores.rank() != 2) throw DimensionError("scores/labels must be matching [N,C]");
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  double total = 0.0;
  std::size_t used = 0;
  std::vector<double> s(n);
  std::vector<int> l(n);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = scores[i * c + k];
      l[i] = labels[i * c + k] != 0.0 ? 1 : 0;
    }
    if (auto ap = average_precision(s, l)) {
      total += *ap;
      ++used;
    }
  }
  if (used == 0) throw ContractError("no class has a positive label");
  return total / static_cast<double>(used);
}

inline constexpr std::size_t kScoreChunk = 32;

/// Sigmoid class scores [N,C] for images[N,3,H,W], processed in fixed chunks.
inline Tensor predict_scores(const nn::Model& classifier, const Tensor& images) {
  const std::size_t n = images.dim(0), per = images.size() / n;
  const std::size_t c = nn::num_classes(classifier);
  Tensor out({n, c});
  for (std::size_t start = 0; start < n; start += kScoreChunk) {
    const std::size_t m = std::min(kScoreChunk, n - start);
    Shape shape = images.shape();
    shape[0] = m;
    Tensor chunk(shape, std::vector<double>(images.data().begin() + static_cast<std::ptrdiff_t>(start * per),
                                            images.data().begin() + static_cast<std::ptrdiff_t>((start + m) * per)));
    const auto logits = nn::classify(classifier, ad::constant(std::move(chunk)), false).logits.value();
    for (std::size_t i = 0; i < m * c; ++i) out[start * c + i] = ad::detail::stable_sigmoid(logits[i]);
  }
  return out;
}

inline double dataset_map(const nn::Model& classifier, const data::Dataset& d, const std::vector<std::size_t>& indices) {
  auto [x, y] = data::make_batch(d, indices);
  return mean_average_precision(predict_scores(classifier, x), y);
}

/// Mean over images and columns of the row-wise variance of A_r at width W'.
inline double mean_column_variance(const nn::Model& retargeter, const data::Dataset& d,
                                   const std::vector<std::size_t>& indices, std::size_t target_width) {
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < indices.size(); start += kScoreChunk) {
    std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                   indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), start + kScoreChunk)));
    auto [x, y] = data::make_batch(d, chunk);
    const auto a_d = nn::decoder_attention(retargeter, ad::constant(x), false);
    const Tensor a_r = ad::resize_bilinear(a_d, x.dim(2), target_width).value();
    const std::size_t h = a_r.dim(2), w = a_r.dim(3);
    for (std::size_t b = 0; b < a_r.dim(0); ++b)
      for (std::size_t col = 0; col < w; ++col) {
        double mean = 0.0;
        for (std::size_t r = 0; r < h; ++r) mean += a_r.at(b, 0, r, col);
        mean /= static_cast<double>(h);
        double var = 0.0;
        for (std::size_t r = 0; r < h; ++r) var += (a_r.at(b, 0, r, col) - mean) * (a_r.at(b, 0, r, col) - mean);
        acc += var / static_cast<double>(h);
        ++count;
      }
  }
  return acc / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// mAP-ratio experiment

inline const std::vector<std::string> kMethods = {"ours", "linear", "center_crop", "edge_crop", "seam_carve"};
inline const std::vector<double> kDefaultScales = {0.7, 0.6, 0.5, 0.4, 0.3};

struct EvalReport {
  std::vector<double> scales;
  std::map<std::string, std::vector<double>> methods;
  nlohmann::json meta = nlohmann::json::object();

  double ratio(const std::string& method, double scale) const {
    const auto& r = methods.at(method);
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (std::abs(scales[i] - scale) < 1e-9) return r[i];
    }
    throw ContractError("scale not in report");
  }

  nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [name, r] : methods) m[name] = r;
    return {{"scales", scales}, {"methods", m}, {"meta", meta}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
      r.scales = j.at("scales").get<std::vector<double>>();
      for (const auto& [name, v] : j.at("methods").items()) r.methods[name] = v.get<std::vector<double>>();
      r.meta = j.value("meta", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad eval report: ") + e.what());
    }
    for (const auto& [name, v] : r.methods) {
      if (v.size() != r.scales.size()) throw FormatError("eval report row '" + name + "' has the wrong length");
    }
    return r;
  }

  /// One row per (method, scale).
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "method,scale,map_ratio\n";
    for (const auto& [name, r] : methods)
      for (std::size_t i = 0; i < scales.size(); ++i) os << name << ',' << scales[i] << ',' << r[i] << '\n';
    return os.str();
  }
};

inline std::size_t scaled_width(std::size_t width, double scale) {
  return static_cast<std::size_t>(std::max<long long>(1, std::llround(scale * static_cast<double>(width))));
}

/// For every method and scale: narrow each eval image to round(scale * W),
/// stretch it back to W linearly, classify with `eval_classifier` and divide
/// the mAP by the mAP on the untouched images.
inline EvalReport map_ratio_experiment(const data::Dataset& d, const std::vector<std::size_t>& indices,
                                       const nn::Model& retargeter, const nn::Model& eval_classifier,
                                       const std::vector<double>& scales = kDefaultScales, double lambda = 0.2) {
  if (indices.empty()) throw ContractError("empty evaluation split");
  auto [originals, labels] = data::make_batch(d, indices);
  const double base_map = mean_average_precision(predict_scores(eval_classifier, originals), labels);
  const std::size_t n = originals.dim(0), h = originals.dim(2), w = originals.dim(3);
  const std::size_t per = 3 * h * w;

  auto image_at = [&](std::size_t i) {
    return Tensor({1, 3, h, w}, std::vector<double>(originals.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                                                    originals.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
  };
  std::vector<Tensor> attention(n);
  const shift::ModelSource source(retargeter);
  for (std::size_t i = 0; i < n; ++i) attention[i] = source.attention(image_at(i));
  const auto filter = source.filter(h);

  EvalReport report;
  report.scales = scales;
  report.meta = {{"base_map", base_map}, {"eval_images", n}, {"lambda", lambda}};
  for (const auto& method : kMethods) {
    auto& row = report.methods[method];
    for (double scale : scales) {
      const std::size_t tw = scaled_width(w, scale);
      Tensor restored({n, 3, h, w});
      for (std::size_t i = 0; i < n; ++i) {
        Tensor img = image_at(i);
        Tensor out;
        if (tw == w) {
          out = img;
        } else if (method == "ours") {
          out = shift::shift_forward(ad::constant(attention[i]), ad::constant(img), filter, tw, lambda).output.value();
        } else {
          out = baseline::apply(baseline::parse_method(method), img, tw);
        }
        const Tensor back = tw == w ? out : baseline::linear_scale(out, w);
        std::copy(back.data().begin(), back.data().end(), restored.data().begin() + static_cast<std::ptrdiff_t>(i * per));
      }
      const double m = mean_average_precision(predict_scores(eval_classifier, restored), labels);
      row.push_back(m / base_map);
    }
  }
  return report;
}

}  // namespace retarget::eval
