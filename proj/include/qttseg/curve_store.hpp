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

#ifndef QTTSEG_CURVE_STORE_HPP
#define QTTSEG_CURVE_STORE_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "qttseg/search_space.hpp"

namespace qttseg {

inline constexpr int kMaxEpochs = 10;

/// First 16 hex characters of SHA-256 over the canonical config JSON.
inline std::string config_id(const Configuration& c) {
  const std::string text = canonical_json(c);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("config_id: SHA-256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < 8; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

/// One observed epoch of one fine-tuning run.
struct CurveRecord {
  std::string dataset_id;
  std::string config_id;
  Configuration config;
  int epoch = 1;
  double val_iou = 0.0;
  double epoch_cost_s = 1.0;
  std::int64_t seed = 0;

  bool operator==(const CurveRecord&) const = default;
};

class CurveStoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json to_json(const CurveRecord& r) {
  nlohmann::json j;
  j["dataset_id"] = r.dataset_id;
  j["config_id"] = r.config_id;
  j["config"] = to_json(r.config);
  j["epoch"] = r.epoch;
  j["val_iou"] = r.val_iou;
  j["epoch_cost_s"] = r.epoch_cost_s;
  j["seed"] = r.seed;
  return j;
}

inline CurveRecord curve_record_from_json(const nlohmann::json& j) {
  CurveRecord r;
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.config_id = j.at("config_id").get<std::string>();
  r.config = config_from_json(j.at("config"));
  r.epoch = j.at("epoch").get<int>();
  r.val_iou = j.at("val_iou").get<double>();
  r.epoch_cost_s = j.at("epoch_cost_s").get<double>();
  r.seed = j.at("seed").get<std::int64_t>();
  return r;
}

/// (dataset_id, config_id) pair with the best observed value; the result of
/// CurveStore::best_observed.
struct BestObservation {
  std::string config_id;
  int epoch = 0;
  double val_iou = 0.0;
};

/// Append-only learning-curve collection. Within one (dataset, config, seed)
/// key the epochs always form the prefix 1..k.
class CurveStore {
 public:
  using Key = std::tuple<std::string, std::string, std::int64_t>;

  CurveStore() = default;

  /// Throws CurveStoreError on an invalid record or a non-contiguous epoch.
  void append(CurveRecord r) {
    check_record(r);
    const Key key{r.dataset_id, r.config_id, r.seed};
    auto it = last_epoch_.find(key);
    const int expected = it == last_epoch_.end() ? 1 : it->second + 1;
    if (r.epoch < expected) throw CurveStoreError("duplicate epoch " + std::to_string(r.epoch));
    if (r.epoch > expected) {
      throw CurveStoreError("epoch gap: expected epoch " + std::to_string(expected) + ", got " +
                            std::to_string(r.epoch));
    }
    last_epoch_[key] = r.epoch;
    records_.push_back(std::move(r));
  }

  const std::vector<CurveRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  std::set<std::string> dataset_ids() const {
    std::set<std::string> ids;
    for (const auto& r : records_) ids.insert(r.dataset_id);
    return ids;
  }

  /// Number of distinct (dataset, config, seed) curves.
  std::size_t curve_count() const { return last_epoch_.size(); }

  /// Train = every record of another dataset; held = the target's records.
  std::pair<CurveStore, CurveStore> lodo_split(const std::string& target) const {
    std::pair<CurveStore, CurveStore> out;
    for (const auto& r : records_) (r.dataset_id == target ? out.second : out.first).append(r);
    return out;
  }

  /// Maximum val_iou for a dataset and seed. Ties prefer the lower cumulative
  /// cost up to that epoch, then the lexicographically smaller config_id.
  std::optional<BestObservation> best_observed(const std::string& dataset_id,
                                               std::int64_t seed) const {
    std::map<Key, double> cumulative;
    std::optional<BestObservation> best;
    double best_cost = 0;
    for (const auto& r : records_) {
      if (r.dataset_id != dataset_id || r.seed != seed) continue;
      double& c = cumulative[Key{r.dataset_id, r.config_id, r.seed}];
      c += r.epoch_cost_s;
      const bool better =
          !best || r.val_iou > best->val_iou ||
          (r.val_iou == best->val_iou &&
           (c < best_cost || (c == best_cost && r.config_id < best->config_id)));
      if (better) {
        best = BestObservation{r.config_id, r.epoch, r.val_iou};
        best_cost = c;
      }
    }
    return best;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CurveStoreError("cannot write " + path.string());
    for (const auto& r : records_) out << to_json(r).dump() << '\n';
    if (!out) throw CurveStoreError("write failed: " + path.string());
  }

  static CurveStore load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CurveStoreError("cannot open " + path.string());
    CurveStore store;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        store.append(curve_record_from_json(nlohmann::json::parse(line)));
      } catch (const std::exception& e) {
        throw CurveStoreError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    return store;
  }

  bool operator==(const CurveStore& o) const { return records_ == o.records_; }

 private:
  static void check_record(const CurveRecord& r) {
    if (!(r.val_iou >= 0.0 && r.val_iou <= 1.0)) {
      throw CurveStoreError("val_iou out of range [0,1]: " + std::to_string(r.val_iou));
    }
    if (!(r.epoch_cost_s > 0.0) || !std::isfinite(r.epoch_cost_s)) {
      throw CurveStoreError("epoch_cost_s must be > 0");
    }
    if (r.epoch < 1 || r.epoch > kMaxEpochs) throw CurveStoreError("epoch outside [1,10]");
    if (r.dataset_id.empty()) throw CurveStoreError("empty dataset_id");
    if (auto bad = validate(r.config); !bad.empty()) {
      throw CurveStoreError("invalid config field '" + bad.front() + "'");
    }
    if (r.config_id != config_id(r.config)) throw CurveStoreError("config_id does not match config");
  }

  std::vector<CurveRecord> records_;
  std::map<Key, int> last_epoch_;
};

}  // namespace qttseg

#endif  // QTTSEG_CURVE_STORE_HPP
