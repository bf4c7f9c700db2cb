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

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "qttseg/acquisition.hpp"
#include "oracles.hpp"

namespace qttseg {
namespace {

using oracle::monte_carlo_ei;

CandidateAction action(const std::string& id, int epoch = 1) {
  CandidateAction a;
  a.config_id = id;
  a.next_epoch = epoch;
  a.history.assign(static_cast<std::size_t>(epoch - 1), 0.5);
  return a;
}

TEST(ExpectedImprovement, KnownValues) {
  EXPECT_NEAR(expected_improvement(0.5, 1.0, 0.5), 0.3989422804014327, 1e-12);
  EXPECT_EQ(expected_improvement(0.3, 0.0, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(expected_improvement(0.7, 0.0, 0.5), 0.7 - 0.5);
  EXPECT_NEAR(expected_improvement(0.6, 0.01, 0.5), 0.10833, 5e-6);
  EXPECT_THROW(expected_improvement(0.5, -1e-3, 0.5), std::invalid_argument);
}

TEST(ExpectedImprovement, MatchesMonteCarlo) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 10; ++t) {
    const double mu = u(rng), sigma = 0.01 + 0.3 * u(rng), inc = u(rng);
    const auto [mc, se] = monte_carlo_ei(mu, sigma, inc, 200000, 1000 + t);
    EXPECT_LE(std::abs(expected_improvement(mu, sigma * sigma, inc) - mc), 3.0 * se + 1e-12) << t;
  }
}

TEST(ExpectedImprovement, NonNegativeAndMonotone) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int t = 0; t < 100000; ++t) {
    const double mu = u(rng), var = std::pow(10.0, u(rng)), inc = u(rng);
    ASSERT_GE(expected_improvement(mu, var, inc), 0.0);
  }
  for (int t = 0; t < 1000; ++t) {
    const double inc = u(rng) * 0.1, mu = inc - std::abs(u(rng)) * 0.1, sigma = 0.05 + std::abs(u(rng)) * 0.02;
    EXPECT_GT(expected_improvement(mu + 0.01, sigma * sigma, inc), expected_improvement(mu, sigma * sigma, inc));
    EXPECT_GT(expected_improvement(mu, (sigma * 1.1) * (sigma * 1.1), inc), expected_improvement(mu, sigma * sigma, inc));
  }
}

TEST(RankActions, CheaperFirstForEqualPredictions) {
  const std::vector<CandidateAction> c = {action("b"), action("a")};
  const std::vector<Prediction> p = {{0.6, 0.01}, {0.6, 0.01}};
  const std::vector<double> cost = {1.0, 2.0};
  const auto r = rank_actions(c, p, cost, 0.5);
  EXPECT_EQ(r.front().action.config_id, "b");
}

TEST(RankActions, HandComputedOrder) {
  // EI / cost:
  //   x: mu 0.60 sd 0.10, inc 0.5 -> 0.108332 / 2.0 = 0.054166
  //   y: mu 0.50 sd 0.20         -> 0.079788 / 1.0 = 0.079788
  //   z: mu 0.70 sd 0.00         -> 0.2      / 4.0 = 0.05
  const std::vector<CandidateAction> c = {action("x"), action("y"), action("z")};
  const std::vector<Prediction> p = {{0.6, 0.01}, {0.5, 0.04}, {0.7, 0.0}};
  const std::vector<double> cost = {2.0, 1.0, 4.0};
  const auto r = rank_actions(c, p, cost, 0.5);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].action.config_id, "y");
  EXPECT_EQ(r[1].action.config_id, "x");
  EXPECT_EQ(r[2].action.config_id, "z");
  EXPECT_NEAR(r[0].score, 0.0797884560802865, 1e-9);
  EXPECT_NEAR(r[1].score, 0.1083315470 / 2.0, 1e-9);
  EXPECT_NEAR(r[2].score, 0.05, 1e-12);
}

TEST(RankActions, CostFloorAndTies) {
  const std::vector<CandidateAction> c = {action("b", 2), action("c", 1), action("a", 1)};
  const std::vector<Prediction> p = {{0.6, 0.01}, {0.6, 0.01}, {0.6, 0.01}};
  const std::vector<double> cost = {0.01, 0.05, 0.1};
  const auto r = rank_actions(c, p, cost, 0.5);
  EXPECT_EQ(r[0].score, r[2].score);
  EXPECT_EQ(r[0].action.config_id, "a");
  EXPECT_EQ(r[1].action.config_id, "c");
  EXPECT_EQ(r[2].action.config_id, "b");
  EXPECT_THROW(rank_actions({}, {}, {}, 0.5), std::invalid_argument);
  EXPECT_THROW(rank_actions(c, std::vector<Prediction>(2), cost, 0.5), std::invalid_argument);
}

TEST(RankActions, InvariantUnderCostScaleAndShift) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<CandidateAction> c;
    std::vector<Prediction> p, p_shift;
    std::vector<double> cost, cost_scaled;
    for (int i = 0; i < 12; ++i) {
      c.push_back(action("c" + std::to_string(i)));
      p.push_back({u(rng), 0.001 + 0.05 * u(rng)});
      p_shift.push_back({p.back().mean + 0.25, p.back().variance});
      cost.push_back(0.5 + 3.0 * u(rng));
      cost_scaled.push_back(cost.back() * 10.0);
    }
    const auto a = rank_actions(c, p, cost, 0.6);
    const auto b = rank_actions(c, p, cost_scaled, 0.6);
    const auto d = rank_actions(c, p_shift, cost, 0.85);
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].action.config_id, b[i].action.config_id);
      EXPECT_EQ(a[i].action.config_id, d[i].action.config_id);
    }
  }
}

TEST(SelectNext, FreshPoolStartsAtEpochOne) {
  const RunState s = RunState::from_pool(sample(3, 128));
  const PerfPredictor perf = PerfPredictor::fresh(kPredictorInputDim, 1);
  const CostPredictor cost = CostPredictor::fresh(kPredictorInputDim, 2);
  const std::vector<double> meta(7, 0.0);
  const ScoredAction a = select_next(s, perf, cost, meta);
  EXPECT_EQ(a.action.next_epoch, 1);
  EXPECT_EQ(select_next(s, perf, cost, meta).action.config_id, a.action.config_id);
}

TEST(SelectNext, ContinuesDominantConfig) {
  const std::vector<Configuration> pool = sample(5, 20);
  RunState s = RunState::from_pool(pool);
  s.pool[7].history = {0.9};
  s.incumbent = 0.9;
  const std::vector<double> meta(7, 0.0);
  const CostPredictor cost = CostPredictor::fresh(kPredictorInputDim, 2);
  // Condition on every other config at 0.3 and the leader at 0.9.
  PerfPredictor perf = PerfPredictor::fresh(kPredictorInputDim, 1);
  perf.kernel.log_noise_var = std::log(1e-4);
  std::vector<PredictorInput> xs;
  std::vector<double> ys;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (i == 7) continue;
    xs.push_back(featurize(pool[i], meta, 1, {}));
    ys.push_back(0.3);
  }
  xs.push_back(featurize(pool[7], meta, 1, {}));
  ys.push_back(0.9);
  xs.push_back(featurize(pool[7], meta, 2, std::vector<double>{0.9}));
  ys.push_back(0.95);
  perf.condition(stack_inputs(xs), Eigen::Map<Eigen::VectorXd>(ys.data(), static_cast<Eigen::Index>(ys.size())));
  const ScoredAction a = select_next(s, perf, cost, meta);
  EXPECT_EQ(a.action.config_id, s.pool[7].config_id);
  EXPECT_EQ(a.action.next_epoch, 2);
}

TEST(SelectNext, ExhaustedPoolThrows) {
  RunState s = RunState::from_pool(sample(1, 3));
  for (auto& e : s.pool) e.history.assign(10, 0.5);
  const PerfPredictor perf = PerfPredictor::fresh(kPredictorInputDim, 1);
  const CostPredictor cost = CostPredictor::fresh(kPredictorInputDim, 2);
  const std::vector<double> meta(7, 0.0);
  try {
    select_next(s, perf, cost, meta);
    FAIL() << "expected PoolExhausted";
  } catch (const PoolExhausted& e) {
    EXPECT_STREQ(e.what(), "pool exhausted");
  }
  s.pool[0].history.resize(4);
  s.pool[0].quarantined = true;
  EXPECT_THROW(select_next(s, perf, cost, meta), PoolExhausted);
}

TEST(CandidateInputs, HistoryLengthChecked) {
  CandidateAction a = action("a", 3);
  a.history.pop_back();
  EXPECT_THROW(candidate_inputs({a}, std::vector<double>(7, 0.0)), std::invalid_argument);
}

}  // namespace
}  // namespace qttseg
