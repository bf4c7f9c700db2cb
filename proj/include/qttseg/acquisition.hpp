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

#ifndef QTTSEG_ACQUISITION_HPP
#define QTTSEG_ACQUISITION_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qttseg/curve_store.hpp"
#include "qttseg/predictors.hpp"
#include "qttseg/search_space.hpp"

namespace qttseg {

inline constexpr double kCostFloorSeconds = 0.1;

inline double normal_pdf(double z) { return 0.3989422804014327 * std::exp(-0.5 * z * z); }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// E[max(X - incumbent, 0)] for X ~ N(mean, variance).
inline double expected_improvement(double mean, double variance, double incumbent) {
  if (!(variance >= 0.0)) throw std::invalid_argument("expected_improvement: negative variance");
  const double sigma = std::sqrt(variance);
  if (sigma <= 1e-12) return std::max(mean - incumbent, 0.0);
  const double z = (mean - incumbent) / sigma;
  return std::max(0.0, sigma * (z * normal_cdf(z) + normal_pdf(z)));
}

/// Advancing one configuration by one epoch.
struct CandidateAction {
  std::string config_id;
  Configuration config;
  int next_epoch = 1;
  std::vector<double> history;  // val_iou of epochs 1..next_epoch-1
};

struct ScoredAction {
  CandidateAction action;
  double score = 0.0;
  double ei = 0.0;
  double predicted_cost = 0.0;
  Prediction prediction;
};

/// Orders actions by EI / max(cost, 0.1 s), descending. Ties go to the lower
/// next_epoch, then the smaller config_id.
inline std::vector<ScoredAction> rank_actions(const std::vector<CandidateAction>& candidates,
                                              std::span<const Prediction> predictions,
                                              std::span<const double> costs, double incumbent) {
  if (candidates.empty()) throw std::invalid_argument("score_candidates: empty candidate list");
  if (predictions.size() != candidates.size() || costs.size() != candidates.size()) {
    throw std::invalid_argument("score_candidates: size mismatch");
  }
  std::vector<ScoredAction> out;
  out.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    ScoredAction s;
    s.action = candidates[i];
    s.prediction = predictions[i];
    s.predicted_cost = costs[i];
    s.ei = expected_improvement(predictions[i].mean, predictions[i].variance, incumbent);
    s.score = s.ei / std::max(costs[i], kCostFloorSeconds);
    out.push_back(std::move(s));
  }
  std::stable_sort(out.begin(), out.end(), [](const ScoredAction& a, const ScoredAction& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.action.next_epoch != b.action.next_epoch) return a.action.next_epoch < b.action.next_epoch;
    return a.action.config_id < b.action.config_id;
  });
  return out;
}

inline std::vector<PredictorInput> candidate_inputs(const std::vector<CandidateAction>& candidates,
                                                    std::span<const double> meta) {
  std::vector<PredictorInput> inputs;
  inputs.reserve(candidates.size());
  for (const auto& c : candidates) {
    if (static_cast<int>(c.history.size()) != c.next_epoch - 1) {
      throw std::invalid_argument("candidate history length must equal next_epoch - 1");
    }
    inputs.push_back(featurize(c.config, meta, c.next_epoch, c.history));
  }
  return inputs;
}

inline std::vector<ScoredAction> score_candidates(const PerfPredictor& perf, const CostPredictor& cost,
                                                  double incumbent,
                                                  const std::vector<CandidateAction>& candidates,
                                                  std::span<const double> meta) {
  if (candidates.empty()) throw std::invalid_argument("score_candidates: empty candidate list");
  const Eigen::MatrixXd x = stack_inputs(candidate_inputs(candidates, meta));
  const std::vector<Prediction> preds = perf.predict(x);
  const Eigen::VectorXd c = cost.predict(x);
  return rank_actions(candidates, preds, std::span<const double>(c.data(), static_cast<std::size_t>(c.size())),
                      incumbent);
}

class PoolExhausted : public std::runtime_error {
 public:
  PoolExhausted() : std::runtime_error("pool exhausted") {}
};

/// Per-run view of the candidate pool.
struct RunState {
  struct Entry {
    std::string config_id;
    Configuration config;
    std::vector<double> history;
    bool quarantined = false;
  };

  std::vector<Entry> pool;
  std::optional<double> incumbent;

  static RunState from_pool(const std::vector<Configuration>& configs) {
    RunState s;
    for (const auto& c : configs) s.pool.push_back({config_id(c), c, {}, false});
    return s;
  }

  /// Every config that is neither finished (10 epochs) nor quarantined.
  std::vector<CandidateAction> open_actions() const {
    std::vector<CandidateAction> out;
    for (const auto& e : pool) {
      if (e.quarantined || static_cast<int>(e.history.size()) >= kMaxEpochs) continue;
      out.push_back({e.config_id, e.config, static_cast<int>(e.history.size()) + 1, e.history});
    }
    return out;
  }
};

/// Top-ranked open action. Before any observation the incumbent is 0.
inline ScoredAction select_next(const RunState& state, const PerfPredictor& perf, const CostPredictor& cost,
                                std::span<const double> meta) {
  const auto open = state.open_actions();
  if (open.empty()) throw PoolExhausted();
  return score_candidates(perf, cost, state.incumbent.value_or(0.0), open, meta).front();
}

}  // namespace qttseg

#endif  // QTTSEG_ACQUISITION_HPP
