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

#include <chrono>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "qttseg/search_space.hpp"
#include "oracles.hpp"

namespace qttseg {
namespace {

using oracle::brute_force;
using oracle::truncated_space;

TEST(EnumerateSize, SchedulerLeafCounts) {
  const SearchSpace& s = default_space();
  EXPECT_EQ(s.scheduler_leaf_count(Scheduler::Plateau), 9u);
  EXPECT_EQ(s.scheduler_leaf_count(Scheduler::CosineWarm), 6u);
  EXPECT_EQ(s.scheduler_leaf_count(Scheduler::Step), 2u);
  EXPECT_EQ(s.scheduler_leaf_count(Scheduler::Poly), 3u);
  EXPECT_EQ(s.scheduler_leaf_count(Scheduler::Cosine), 1u);
  EXPECT_EQ(s.scheduler_leaf_count(Scheduler::OneCycle), 15u * 91u * 991u);
}

TEST(EnumerateSize, FullSpaceValue) {
  // 7 LoRA branches x 4 wd x 27 lr x 8 aug x (1 + 1352715 + 9 + 6 + 2 + 3)
  EXPECT_EQ(enumerate_size(), 8181347328ULL);
  EXPECT_GT(enumerate_size(), 200000000ULL);
}

TEST(EnumerateSize, MatchesNestedLoopsOnTruncatedSpace) {
  const SearchSpace s = truncated_space();
  const auto all = brute_force(s);
  EXPECT_EQ(s.enumerate_size(), all.size());
  std::set<std::string> distinct;
  for (const auto& c : all) {
    ASSERT_TRUE(is_valid(c, s));
    distinct.insert(canonical_json(c));
  }
  EXPECT_EQ(distinct.size(), all.size());
}

TEST(Validate, ConditionalAndTagRules) {
  Configuration c;
  EXPECT_TRUE(validate(c).empty());
  c.lora_rank = 8;
  EXPECT_EQ(validate(c), std::vector<std::string>{"lora_rank"});

  Configuration lr;
  lr.learning_rate = 0.00055;
  EXPECT_TRUE(is_valid(lr));
  lr.learning_rate = 0.00056;
  EXPECT_EQ(validate(lr), std::vector<std::string>{"learning_rate"});

  Configuration mismatch;
  mismatch.scheduler = Scheduler::Step;
  mismatch.scheduler_params = PolyParams{0.9};
  EXPECT_EQ(validate(mismatch), std::vector<std::string>{"scheduler_params"});

  Configuration lora;
  lora.lora_enabled = true;
  const auto bad = validate(lora);
  EXPECT_EQ(bad, (std::vector<std::string>{"lora_rank", "lora_dropout"}));

  Configuration off_grid;
  off_grid.scheduler = Scheduler::OneCycle;
  off_grid.scheduler_params = OneCycleParams{0.031, 10, 10};
  EXPECT_EQ(validate(off_grid), std::vector<std::string>{"scheduler_params"});
}

TEST(Sample, DeterministicAndValid) {
  const auto a = sample(42, 128);
  const auto b = sample(42, 128);
  ASSERT_EQ(a.size(), 128u);
  EXPECT_EQ(a, b);
  for (const auto& c : a) EXPECT_TRUE(is_valid(c));
  EXPECT_EQ(sample(7, 1), sample(7, 1));
  EXPECT_THROW(sample(0, 0), std::invalid_argument);
}

TEST(Sample, LoraFractionWithinBinomialBound) {
  const auto cs = sample(2026, 10000);
  int on = 0;
  for (const auto& c : cs) on += c.lora_enabled;
  EXPECT_GE(on, 4700);
  EXPECT_LE(on, 5300);
}

TEST(Sample, SchedulerFamiliesBalanced) {
  const auto cs = sample(99, 12000);
  std::array<int, 6> counts{};
  for (const auto& c : cs) ++counts[static_cast<int>(c.scheduler)];
  // each family p = 1/6; 2000 +- 5 sigma (sigma ~ 40.8)
  for (int n : counts) {
    EXPECT_GT(n, 1796);
    EXPECT_LT(n, 2204);
  }
}

TEST(Sample, EncodeNeverFailsAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 100000; ++seed) {
    const auto c = sample(seed, 1).front();
    ASSERT_NO_THROW(encode(c)) << "seed " << seed;
  }
}

TEST(Encode, LearningRateEndpoints) {
  Configuration c;
  c.learning_rate = 1e-5;
  EXPECT_DOUBLE_EQ(encode(c)[EncodingLayout::kLearningRate], 0.0);
  c.learning_rate = 7e-3;
  EXPECT_DOUBLE_EQ(encode(c)[EncodingLayout::kLearningRate], 1.0);
}

TEST(Encode, WeightDecayZeroIndicator) {
  Configuration c;
  c.weight_decay = 0.0;
  auto v = encode(c);
  EXPECT_EQ(v[EncodingLayout::kWeightDecayZero], 1.0);
  EXPECT_EQ(v[EncodingLayout::kWeightDecay], 0.0);
  c.weight_decay = 1e-5;
  v = encode(c);
  EXPECT_EQ(v[EncodingLayout::kWeightDecayZero], 0.0);
  EXPECT_DOUBLE_EQ(v[EncodingLayout::kWeightDecay], 0.0);
  c.weight_decay = 1e-4;
  EXPECT_DOUBLE_EQ(encode(c)[EncodingLayout::kWeightDecay], 1.0);
}

TEST(Encode, FixedDimensionAndOneHotGroups) {
  using L = EncodingLayout;
  auto group_sum = [](const ConfigVector& v, std::size_t at, std::size_t n) {
    double s = 0;
    for (std::size_t i = at; i < at + n; ++i) s += v[i];
    return s;
  };
  for (const auto& c : sample(5, 2000)) {
    const auto v = encode(c);
    ASSERT_EQ(v.size(), kConfigDim);
    EXPECT_EQ(group_sum(v, L::kScheduler, 6), 1.0);
    EXPECT_EQ(group_sum(v, L::kLoraRank, 3), c.lora_enabled ? 1.0 : 0.0);
    EXPECT_EQ(group_sum(v, L::kLoraDropout, 2), c.lora_enabled ? 1.0 : 0.0);
    const bool plateau = c.scheduler == Scheduler::Plateau;
    EXPECT_EQ(group_sum(v, L::kPlateauFactor, 3), plateau ? 1.0 : 0.0);
    EXPECT_EQ(group_sum(v, L::kPlateauPatience, 3), plateau ? 1.0 : 0.0);
    const bool warm = c.scheduler == Scheduler::CosineWarm;
    EXPECT_EQ(group_sum(v, L::kCosineWarmT0, 3), warm ? 1.0 : 0.0);
    EXPECT_EQ(group_sum(v, L::kCosineWarmTMult, 2), warm ? 1.0 : 0.0);
    EXPECT_EQ(group_sum(v, L::kStepSize, 2), c.scheduler == Scheduler::Step ? 1.0 : 0.0);
    EXPECT_EQ(group_sum(v, L::kPolyPower, 3), c.scheduler == Scheduler::Poly ? 1.0 : 0.0);
    if (c.scheduler != Scheduler::OneCycle) {
      EXPECT_EQ(group_sum(v, L::kOneCyclePct, 3), 0.0);
    }
    for (double x : v) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

TEST(Encode, InjectiveOnSample) {
  const auto cs = sample(11, 10000);
  std::set<std::string> ids;
  std::set<ConfigVector> vecs;
  for (const auto& c : cs) {
    if (ids.insert(canonical_json(c)).second) vecs.insert(encode(c));
  }
  EXPECT_EQ(vecs.size(), ids.size());
}

TEST(Encode, DeterministicAndRejectsInvalid) {
  const auto c = sample(3, 1).front();
  EXPECT_EQ(encode(c), encode(c));
  Configuration bad;
  bad.learning_rate = 0.5;
  EXPECT_THROW(encode(bad), std::invalid_argument);
}

TEST(Json, RoundTripOmitsAbsentConditionals) {
  for (const auto& c : sample(8, 500)) {
    const auto j = to_json(c);
    EXPECT_EQ(j.contains("lora_rank"), c.lora_enabled);
    EXPECT_EQ(config_from_json(j), c);
    EXPECT_EQ(config_from_json(nlohmann::json::parse(canonical_json(c))), c);
  }
}

TEST(Json, RejectsUnknownFieldsAndSchedulers) {
  auto j = to_json(Configuration{});
  j["optimizer"] = "SGD";
  EXPECT_THROW(config_from_json(j), std::invalid_argument);
  auto k = to_json(Configuration{});
  k["scheduler"] = "Exponential";
  EXPECT_THROW(config_from_json(k), std::invalid_argument);
}

TEST(Json, MismatchedParamsSurviveParsingForValidate) {
  auto j = to_json(Configuration{});
  j["scheduler"] = "Step";
  j["scheduler_params"] = {{"power", 0.9}};
  const Configuration c = config_from_json(j);
  EXPECT_EQ(validate(c), std::vector<std::string>{"scheduler_params"});
}

TEST(Constants, FixedChoices) {
  EXPECT_EQ(Configuration::kOptimizer, "AdamW");
  EXPECT_EQ(Configuration::kLoss, "BCE + Dice");
}

}  // namespace
}  // namespace qttseg
