/*
 * Copyright 2026 The qttseg Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef QTTSEG_META_FEATURES_HPP
#define QTTSEG_META_FEATURES_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace qttseg {

/// A segmentation sample as seen by the descriptor: image geometry plus a
/// label mask of the same height and width (0 = background, k = class k).
struct LabeledImage {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint16_t> mask;  // row-major, height * width
};

/// Dataset descriptor conditioning the predictors.
struct MetaFeatures {
  static constexpr std::size_t kDim = 7;

  double n_images = 0;
  double n_classes = 2;
  double mean_height = 0;
  double mean_width = 0;
  double mean_foreground_fraction = 0;
  double mean_instances_per_image = 0;
  double channel_count = 0;

  std::array<double, kDim> as_array() const {
    return {n_images,    n_classes,  mean_height, mean_width, mean_foreground_fraction,
            mean_instances_per_image, channel_count};
  }
  static MetaFeatures from_array(const std::array<double, kDim>& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5], a[6]};
  }
  bool operator==(const MetaFeatures&) const = default;
};

/// Per-dimension statistics over the meta-training datasets. `mean`/`stddev`
/// are in raw units; `z_mean`/`z_stddev` are in the transformed space that
/// normalize() standardizes in (log1p on counts and image sides).
struct MetaStats {
  std::array<double, MetaFeatures::kDim> mean{};
  std::array<double, MetaFeatures::kDim> stddev{};
  std::array<double, MetaFeatures::kDim> z_mean{};
  std::array<double, MetaFeatures::kDim> z_stddev{};
  bool operator==(const MetaStats&) const = default;
};

inline constexpr double kStdFloor = 1e-8;

// n_images, mean_height, mean_width
inline constexpr std::array<bool, MetaFeatures::kDim> kLog1pDims = {true,  false, true, true,
                                                                    false, false, false};

namespace detail {

/// 4-connected components of label `cls` in a row-major mask.
inline int count_components(const LabeledImage& img, std::uint16_t cls) {
  const int h = img.height, w = img.width;
  std::vector<std::uint8_t> seen(img.mask.size(), 0);
  std::vector<int> stack;
  int components = 0;
  for (int start = 0; start < h * w; ++start) {
    if (img.mask[start] != cls || seen[start]) continue;
    ++components;
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int y = p / w, x = p % w;
      const int nbrs[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& n : nbrs) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        const int q = n[0] * w + n[1];
        if (!seen[q] && img.mask[q] == cls) {
          seen[q] = 1;
          stack.push_back(q);
        }
      }
    }
  }
  return components;
}

}  // namespace detail

/// Descriptor over every provided pair. Integer totals are exact and the
/// per-image fractions are summed in sorted order, so the result does not
/// depend on image order.
inline MetaFeatures extract(const std::vector<LabeledImage>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("extract: empty dataset");
  double sum_h = 0, sum_w = 0, sum_inst = 0;
  std::vector<double> fg_fractions;
  int max_label = 0;
  int channels = 0;
  for (const auto& img : dataset) {
    if (img.height <= 0 || img.width <= 0 ||
        img.mask.size() != static_cast<std::size_t>(img.height) * img.width) {
      throw std::invalid_argument("extract: image/mask shape mismatch");
    }
    std::map<std::uint16_t, int> present;
    std::size_t fg = 0;
    for (auto v : img.mask) {
      if (v != 0) {
        ++fg;
        present.emplace(v, 0);
      }
    }
    int instances = 0;
    for (auto& [cls, _] : present) {
      instances += detail::count_components(img, cls);
      max_label = std::max<int>(max_label, cls);
    }
    sum_h += img.height;
    sum_w += img.width;
    fg_fractions.push_back(static_cast<double>(fg) / static_cast<double>(img.mask.size()));
    sum_inst += instances;
    channels = std::max(channels, img.channels);
  }
  std::sort(fg_fractions.begin(), fg_fractions.end());
  double sum_fg = 0;
  for (double v : fg_fractions) sum_fg += v;
  const double n = static_cast<double>(dataset.size());
  MetaFeatures f;
  f.n_images = n;
  f.n_classes = std::max(2, max_label + 1);
  f.mean_height = sum_h / n;
  f.mean_width = sum_w / n;
  f.mean_foreground_fraction = sum_fg / n;
  f.mean_instances_per_image = sum_inst / n;
  f.channel_count = channels;
  return f;
}

inline std::array<double, MetaFeatures::kDim> transformed(const MetaFeatures& f) {
  auto a = f.as_array();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (kLog1pDims[i]) a[i] = std::log1p(a[i]);
  }
  return a;
}

/// Population mean/std per dimension, std floored at 1e-8.
inline MetaStats fit_stats(const std::vector<MetaFeatures>& features) {
  if (features.empty()) throw std::invalid_argument("fit_stats: empty feature list");
  MetaStats s;
  const double n = static_cast<double>(features.size());
  auto moments = [n](const std::vector<std::array<double, MetaFeatures::kDim>>& rows,
                     std::array<double, MetaFeatures::kDim>& mean,
                     std::array<double, MetaFeatures::kDim>& sd) {
    for (std::size_t d = 0; d < MetaFeatures::kDim; ++d) {
      double m = 0;
      for (const auto& r : rows) m += r[d];
      m /= n;
      double var = 0;
      for (const auto& r : rows) var += (r[d] - m) * (r[d] - m);
      mean[d] = m;
      sd[d] = std::max(std::sqrt(var / n), kStdFloor);
    }
  };
  std::vector<std::array<double, MetaFeatures::kDim>> raw, z;
  for (const auto& f : features) {
    raw.push_back(f.as_array());
    z.push_back(transformed(f));
  }
  moments(raw, s.mean, s.stddev);
  moments(z, s.z_mean, s.z_stddev);
  return s;
}

inline std::vector<double> normalize(const MetaFeatures& f, const MetaStats& s) {
  const auto z = transformed(f);
  std::vector<double> out(MetaFeatures::kDim);
  for (std::size_t d = 0; d < MetaFeatures::kDim; ++d) {
    out[d] = (z[d] - s.z_mean[d]) / s.z_stddev[d];
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const MetaFeatures& f) {
  return {{"n_images", f.n_images},
          {"n_classes", f.n_classes},
          {"mean_height", f.mean_height},
          {"mean_width", f.mean_width},
          {"mean_foreground_fraction", f.mean_foreground_fraction},
          {"mean_instances_per_image", f.mean_instances_per_image},
          {"channel_count", f.channel_count}};
}

inline MetaFeatures meta_features_from_json(const nlohmann::json& j) {
  MetaFeatures f;
  f.n_images = j.at("n_images").get<double>();
  f.n_classes = j.at("n_classes").get<double>();
  f.mean_height = j.at("mean_height").get<double>();
  f.mean_width = j.at("mean_width").get<double>();
  f.mean_foreground_fraction = j.at("mean_foreground_fraction").get<double>();
  f.mean_instances_per_image = j.at("mean_instances_per_image").get<double>();
  f.channel_count = j.at("channel_count").get<double>();
  for (double v : f.as_array()) {
    if (!std::isfinite(v) || v < 0) throw std::invalid_argument("meta-features must be finite and >= 0");
  }
  if (f.mean_foreground_fraction > 1.0) throw std::invalid_argument("mean_foreground_fraction > 1");
  if (f.n_classes < 2) throw std::invalid_argument("n_classes < 2");
  return f;
}

inline nlohmann::json to_json(const MetaStats& s) {
  return {{"mean", s.mean}, {"stddev", s.stddev}, {"z_mean", s.z_mean}, {"z_stddev", s.z_stddev}};
}

inline MetaStats meta_stats_from_json(const nlohmann::json& j) {
  MetaStats s;
  s.mean = j.at("mean").get<std::array<double, MetaFeatures::kDim>>();
  s.stddev = j.at("stddev").get<std::array<double, MetaFeatures::kDim>>();
  s.z_mean = j.at("z_mean").get<std::array<double, MetaFeatures::kDim>>();
  s.z_stddev = j.at("z_stddev").get<std::array<double, MetaFeatures::kDim>>();
  return s;
}

/// dataset_id -> descriptor, the sidecar of a curve file.
using MetaFeatureTable = std::map<std::string, MetaFeatures>;

inline nlohmann::json to_json(const MetaFeatureTable& t) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, f] : t) j[id] = to_json(f);
  return j;
}

inline MetaFeatureTable meta_table_from_json(const nlohmann::json& j) {
  MetaFeatureTable t;
  for (const auto& [id, v] : j.items()) t.emplace(id, meta_features_from_json(v));
  return t;
}

}  // namespace qttseg

#endif  // QTTSEG_META_FEATURES_HPP
