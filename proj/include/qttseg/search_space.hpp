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

#ifndef QTTSEG_SEARCH_SPACE_HPP
#define QTTSEG_SEARCH_SPACE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

namespace qttseg {

enum class Scheduler { Cosine, OneCycle, Plateau, CosineWarm, Step, Poly };

inline constexpr std::array<Scheduler, 6> kAllSchedulers = {
    Scheduler::Cosine,     Scheduler::OneCycle, Scheduler::Plateau,
    Scheduler::CosineWarm, Scheduler::Step,     Scheduler::Poly};

inline std::string_view scheduler_name(Scheduler s) {
  switch (s) {
    case Scheduler::Cosine: return "Cosine";
    case Scheduler::OneCycle: return "OneCycle";
    case Scheduler::Plateau: return "Plateau";
    case Scheduler::CosineWarm: return "CosineWarm";
    case Scheduler::Step: return "Step";
    case Scheduler::Poly: return "Poly";
  }
  return "?";
}

inline std::optional<Scheduler> parse_scheduler(std::string_view name) {
  for (Scheduler s : kAllSchedulers) {
    if (scheduler_name(s) == name) return s;
  }
  return std::nullopt;
}

struct CosineParams {
  bool operator==(const CosineParams&) const = default;
};
struct OneCycleParams {
  double pct_start = 0.03;
  int div_factor = 10;
  int final_div_factor = 10;
  bool operator==(const OneCycleParams&) const = default;
};
struct PlateauParams {
  double factor = 0.1;
  int patience = 0;
  bool operator==(const PlateauParams&) const = default;
};
struct CosineWarmParams {
  int t0 = 2;
  int t_mult = 1;
  bool operator==(const CosineWarmParams&) const = default;
};
struct StepParams {
  int step_size = 3;
  bool operator==(const StepParams&) const = default;
};
struct PolyParams {
  double power = 0.5;
  bool operator==(const PolyParams&) const = default;
};

// Alternative order mirrors the Scheduler enum.
using SchedulerParams = std::variant<CosineParams, OneCycleParams, PlateauParams,
                                     CosineWarmParams, StepParams, PolyParams>;

inline Scheduler params_tag(const SchedulerParams& p) {
  return static_cast<Scheduler>(p.index());
}

/// One point of the fine-tuning configuration space.
///
/// Optimizer (AdamW), loss (BCE + Dice) and the LoRA placement (image encoder
/// attention and MLP layers) are fixed and therefore not fields.
struct Configuration {
  static constexpr std::string_view kOptimizer = "AdamW";
  static constexpr std::string_view kLoss = "BCE + Dice";
  static constexpr std::string_view kLoraTarget =
      "Image Encoder Attention & MLP Layers";

  bool lora_enabled = false;
  std::optional<int> lora_rank;
  std::optional<double> lora_dropout;
  double weight_decay = 0.0;
  double learning_rate = 1e-4;
  bool aug_hflip = false;
  bool aug_vflip = false;
  bool aug_rotate = false;
  Scheduler scheduler = Scheduler::Cosine;
  SchedulerParams scheduler_params = CosineParams{};

  bool operator==(const Configuration&) const = default;
};

/// Enumerated value grids of every searched field. `qtt_seg()` is the full
/// space; tests build truncated copies.
struct SearchSpace {
  std::vector<int> lora_ranks;
  std::vector<double> lora_dropouts;
  std::vector<double> weight_decays;
  std::vector<double> learning_rates;
  std::vector<double> plateau_factors;
  std::vector<int> plateau_patiences;
  std::vector<int> cosine_warm_t0;
  std::vector<int> cosine_warm_t_mult;
  std::vector<double> onecycle_pct_start;
  std::vector<int> onecycle_div_factor;
  std::vector<int> onecycle_final_div_factor;
  std::vector<int> step_sizes;
  std::vector<double> poly_powers;

  static SearchSpace qtt_seg() {
    SearchSpace s;
    s.lora_ranks = {4, 8, 16};
    s.lora_dropouts = {0.0, 0.1};
    s.weight_decays = {0.0, 1e-5, 5e-5, 1e-4};
    s.learning_rates = {1e-5,    1.2e-5,  1.5e-5,  2e-5,    2.5e-5,  3.5e-5, 5e-5,
                        6e-5,    6.5e-5,  0.0001,  0.00012, 0.00018, 0.00025,
                        0.00032, 0.0004,  0.00048, 0.0005,  0.00055, 0.0008,
                        0.001,   0.0015,  0.002,   0.003,   0.004,   0.005,
                        0.006,   0.007};
    s.plateau_factors = {0.1, 0.5, 0.8};
    s.plateau_patiences = {0, 1, 2};
    s.cosine_warm_t0 = {2, 3, 5};
    s.cosine_warm_t_mult = {1, 2};
    // 0.030 .. 0.100 step 0.005, rounded so the JSON form is the short decimal.
    for (int i = 0; i <= 14; ++i) {
      s.onecycle_pct_start.push_back(std::round((0.030 + 0.005 * i) * 1000.0) / 1000.0);
    }
    for (int v = 10; v <= 100; ++v) s.onecycle_div_factor.push_back(v);
    for (int v = 10; v <= 1000; ++v) s.onecycle_final_div_factor.push_back(v);
    s.step_sizes = {3, 5};
    s.poly_powers = {0.5, 0.9, 1.0};
    return s;
  }

  std::uint64_t scheduler_leaf_count(Scheduler sched) const {
    switch (sched) {
      case Scheduler::Cosine: return 1;
      case Scheduler::OneCycle:
        return std::uint64_t{onecycle_pct_start.size()} * onecycle_div_factor.size() *
               onecycle_final_div_factor.size();
      case Scheduler::Plateau:
        return std::uint64_t{plateau_factors.size()} * plateau_patiences.size();
      case Scheduler::CosineWarm:
        return std::uint64_t{cosine_warm_t0.size()} * cosine_warm_t_mult.size();
      case Scheduler::Step: return step_sizes.size();
      case Scheduler::Poly: return poly_powers.size();
    }
    return 0;
  }

  /// Exact cardinality of the conditional space (product over independent
  /// fields, sum over the LoRA and scheduler branches).
  std::uint64_t enumerate_size() const {
    const std::uint64_t lora = 1 + std::uint64_t{lora_ranks.size()} * lora_dropouts.size();
    std::uint64_t sched = 0;
    for (Scheduler s : kAllSchedulers) sched += scheduler_leaf_count(s);
    return lora * weight_decays.size() * learning_rates.size() * 8 * sched;
  }
};

inline const SearchSpace& default_space() {
  static const SearchSpace space = SearchSpace::qtt_seg();
  return space;
}

inline std::uint64_t enumerate_size() { return default_space().enumerate_size(); }

namespace detail {

inline bool on_grid(double v, const std::vector<double>& grid) {
  return std::any_of(grid.begin(), grid.end(), [v](double g) {
    return std::abs(v - g) <= 1e-12 * std::max(1.0, std::abs(g));
  });
}
inline bool on_grid(int v, const std::vector<int>& grid) {
  return std::find(grid.begin(), grid.end(), v) != grid.end();
}

template <typename T>
const T& pick(const std::vector<T>& grid, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dist(0, grid.size() - 1);
  return grid[dist(rng)];
}

inline bool coin(std::mt19937_64& rng) {
  return std::uniform_int_distribution<int>(0, 1)(rng) == 1;
}

}  // namespace detail

/// Returns the names of every offending field; empty means valid.
inline std::vector<std::string> validate(const Configuration& c,
                                         const SearchSpace& space = default_space()) {
  std::vector<std::string> bad;
  if (c.lora_enabled) {
    if (!c.lora_rank || !detail::on_grid(*c.lora_rank, space.lora_ranks)) bad.push_back("lora_rank");
    if (!c.lora_dropout || !detail::on_grid(*c.lora_dropout, space.lora_dropouts))
      bad.push_back("lora_dropout");
  } else {
    if (c.lora_rank) bad.push_back("lora_rank");
    if (c.lora_dropout) bad.push_back("lora_dropout");
  }
  if (!detail::on_grid(c.weight_decay, space.weight_decays)) bad.push_back("weight_decay");
  if (!detail::on_grid(c.learning_rate, space.learning_rates)) bad.push_back("learning_rate");
  if (params_tag(c.scheduler_params) != c.scheduler) {
    bad.push_back("scheduler_params");
    return bad;
  }
  const bool params_ok = std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, CosineParams>) {
          return true;
        } else if constexpr (std::is_same_v<P, OneCycleParams>) {
          return detail::on_grid(p.pct_start, space.onecycle_pct_start) &&
                 detail::on_grid(p.div_factor, space.onecycle_div_factor) &&
                 detail::on_grid(p.final_div_factor, space.onecycle_final_div_factor);
        } else if constexpr (std::is_same_v<P, PlateauParams>) {
          return detail::on_grid(p.factor, space.plateau_factors) &&
                 detail::on_grid(p.patience, space.plateau_patiences);
        } else if constexpr (std::is_same_v<P, CosineWarmParams>) {
          return detail::on_grid(p.t0, space.cosine_warm_t0) &&
                 detail::on_grid(p.t_mult, space.cosine_warm_t_mult);
        } else if constexpr (std::is_same_v<P, StepParams>) {
          return detail::on_grid(p.step_size, space.step_sizes);
        } else {
          return detail::on_grid(p.power, space.poly_powers);
        }
      },
      c.scheduler_params);
  if (!params_ok) bad.push_back("scheduler_params");
  return bad;
}

inline bool is_valid(const Configuration& c, const SearchSpace& space = default_space()) {
  return validate(c, space).empty();
}

namespace detail {

inline Configuration sample_leaves(bool lora, Scheduler family, std::mt19937_64& rng, const SearchSpace& space) {
  Configuration c;
  c.lora_enabled = lora;
  if (c.lora_enabled) {
    c.lora_rank = detail::pick(space.lora_ranks, rng);
    c.lora_dropout = detail::pick(space.lora_dropouts, rng);
  }
  c.weight_decay = detail::pick(space.weight_decays, rng);
  c.learning_rate = detail::pick(space.learning_rates, rng);
  c.aug_hflip = detail::coin(rng);
  c.aug_vflip = detail::coin(rng);
  c.aug_rotate = detail::coin(rng);
  c.scheduler = family;
  switch (c.scheduler) {
    case Scheduler::Cosine: c.scheduler_params = CosineParams{}; break;
    case Scheduler::OneCycle:
      c.scheduler_params = OneCycleParams{detail::pick(space.onecycle_pct_start, rng),
                                          detail::pick(space.onecycle_div_factor, rng),
                                          detail::pick(space.onecycle_final_div_factor, rng)};
      break;
    case Scheduler::Plateau:
      c.scheduler_params = PlateauParams{detail::pick(space.plateau_factors, rng),
                                         detail::pick(space.plateau_patiences, rng)};
      break;
    case Scheduler::CosineWarm:
      c.scheduler_params = CosineWarmParams{detail::pick(space.cosine_warm_t0, rng),
                                            detail::pick(space.cosine_warm_t_mult, rng)};
      break;
    case Scheduler::Step: c.scheduler_params = StepParams{detail::pick(space.step_sizes, rng)}; break;
    case Scheduler::Poly: c.scheduler_params = PolyParams{detail::pick(space.poly_powers, rng)}; break;
  }
  return c;
}

}  // namespace detail

/// Draws one configuration hierarchically: branch first (LoRA on/off,
/// scheduler family), then the leaves of the chosen branch.
inline Configuration sample_one(std::mt19937_64& rng, const SearchSpace& space = default_space()) {
  const bool lora = detail::coin(rng);
  const Scheduler family = kAllSchedulers[std::uniform_int_distribution<std::size_t>(0, 5)(rng)];
  return detail::sample_leaves(lora, family, rng, space);
}

/// `n` configurations, deterministic in `seed`. A duplicate of an earlier draw
/// has its leaves redrawn (same LoRA flag and scheduler family) up to 10 times
/// before being accepted, so branch frequencies stay uniform.
inline std::vector<Configuration> sample(std::uint64_t seed, std::size_t n,
                                         const SearchSpace& space = default_space()) {
  if (n == 0) throw std::invalid_argument("sample: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<Configuration> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Configuration c = sample_one(rng, space);
    for (int attempt = 0; attempt < 10; ++attempt) {
      if (std::find(out.begin(), out.end(), c) == out.end()) break;
      c = detail::sample_leaves(c.lora_enabled, c.scheduler, rng, space);
    }
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Numeric encoding

/// Fixed-length numeric representation fed to the predictors.
using ConfigVector = std::vector<double>;

/// Slot offsets of the encoding.
struct EncodingLayout {
  static constexpr std::size_t kLoraEnabled = 0;
  static constexpr std::size_t kLoraRank = 1;        // one-hot x3
  static constexpr std::size_t kLoraDropout = 4;     // one-hot x2
  static constexpr std::size_t kWeightDecayZero = 6;
  static constexpr std::size_t kWeightDecay = 7;     // log10 min-max over non-zero values
  static constexpr std::size_t kLearningRate = 8;    // log10 min-max
  static constexpr std::size_t kAugHflip = 9;
  static constexpr std::size_t kAugVflip = 10;
  static constexpr std::size_t kAugRotate = 11;
  static constexpr std::size_t kScheduler = 12;      // one-hot x6
  static constexpr std::size_t kPlateauFactor = 18;  // one-hot x3
  static constexpr std::size_t kPlateauPatience = 21;  // one-hot x3
  static constexpr std::size_t kCosineWarmT0 = 24;     // one-hot x3
  static constexpr std::size_t kCosineWarmTMult = 27;  // one-hot x2
  static constexpr std::size_t kOneCyclePct = 29;
  static constexpr std::size_t kOneCycleDiv = 30;
  static constexpr std::size_t kOneCycleFinalDiv = 31;
  static constexpr std::size_t kStepSize = 32;         // one-hot x2
  static constexpr std::size_t kPolyPower = 34;        // one-hot x3
  static constexpr std::size_t kDim = 37;
};

inline constexpr std::size_t kConfigDim = EncodingLayout::kDim;

namespace detail {

template <typename T>
std::size_t index_of(const std::vector<T>& grid, T v) {
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if constexpr (std::is_floating_point_v<T>) {
      if (std::abs(grid[i] - v) <= 1e-12 * std::max(1.0, std::abs(grid[i]))) return i;
    } else {
      if (grid[i] == v) return i;
    }
  }
  throw std::invalid_argument("value not on grid");
}

inline double minmax(double v, double lo, double hi) {
  return hi > lo ? (v - lo) / (hi - lo) : 0.0;
}

inline double log_minmax(double v, const std::vector<double>& grid) {
  double lo = 0, hi = 0;
  bool first = true;
  for (double g : grid) {
    if (g <= 0) continue;
    const double l = std::log10(g);
    if (first) {
      lo = hi = l;
      first = false;
    }
    lo = std::min(lo, l);
    hi = std::max(hi, l);
  }
  return minmax(std::log10(v), lo, hi);
}

}  // namespace detail

inline ConfigVector encode(const Configuration& c, const SearchSpace& space = default_space()) {
  if (auto bad = validate(c, space); !bad.empty()) {
    throw std::invalid_argument("encode: invalid configuration field '" + bad.front() + "'");
  }
  using L = EncodingLayout;
  ConfigVector v(L::kDim, 0.0);
  if (c.lora_enabled) {
    v[L::kLoraEnabled] = 1.0;
    v[L::kLoraRank + detail::index_of(space.lora_ranks, *c.lora_rank)] = 1.0;
    v[L::kLoraDropout + detail::index_of(space.lora_dropouts, *c.lora_dropout)] = 1.0;
  }
  if (c.weight_decay == 0.0) {
    v[L::kWeightDecayZero] = 1.0;
  } else {
    v[L::kWeightDecay] = detail::log_minmax(c.weight_decay, space.weight_decays);
  }
  v[L::kLearningRate] = detail::log_minmax(c.learning_rate, space.learning_rates);
  v[L::kAugHflip] = c.aug_hflip ? 1.0 : 0.0;
  v[L::kAugVflip] = c.aug_vflip ? 1.0 : 0.0;
  v[L::kAugRotate] = c.aug_rotate ? 1.0 : 0.0;
  v[L::kScheduler + static_cast<std::size_t>(c.scheduler)] = 1.0;
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, OneCycleParams>) {
          const auto& pct = space.onecycle_pct_start;
          const auto& div = space.onecycle_div_factor;
          const auto& fin = space.onecycle_final_div_factor;
          v[L::kOneCyclePct] = detail::minmax(p.pct_start, pct.front(), pct.back());
          v[L::kOneCycleDiv] = detail::minmax(p.div_factor, div.front(), div.back());
          v[L::kOneCycleFinalDiv] = detail::minmax(p.final_div_factor, fin.front(), fin.back());
        } else if constexpr (std::is_same_v<P, PlateauParams>) {
          v[L::kPlateauFactor + detail::index_of(space.plateau_factors, p.factor)] = 1.0;
          v[L::kPlateauPatience + detail::index_of(space.plateau_patiences, p.patience)] = 1.0;
        } else if constexpr (std::is_same_v<P, CosineWarmParams>) {
          v[L::kCosineWarmT0 + detail::index_of(space.cosine_warm_t0, p.t0)] = 1.0;
          v[L::kCosineWarmTMult + detail::index_of(space.cosine_warm_t_mult, p.t_mult)] = 1.0;
        } else if constexpr (std::is_same_v<P, StepParams>) {
          v[L::kStepSize + detail::index_of(space.step_sizes, p.step_size)] = 1.0;
        } else if constexpr (std::is_same_v<P, PolyParams>) {
          v[L::kPolyPower + detail::index_of(space.poly_powers, p.power)] = 1.0;
        }
      },
      c.scheduler_params);
  return v;
}

// ---------------------------------------------------------------------------
// Canonical JSON

inline nlohmann::json to_json(const Configuration& c) {
  nlohmann::json j;
  j["lora_enabled"] = c.lora_enabled;
  if (c.lora_rank) j["lora_rank"] = *c.lora_rank;
  if (c.lora_dropout) j["lora_dropout"] = *c.lora_dropout;
  j["weight_decay"] = c.weight_decay;
  j["learning_rate"] = c.learning_rate;
  j["aug_hflip"] = c.aug_hflip;
  j["aug_vflip"] = c.aug_vflip;
  j["aug_rotate"] = c.aug_rotate;
  j["scheduler"] = std::string(scheduler_name(c.scheduler));
  nlohmann::json p = nlohmann::json::object();
  std::visit(
      [&](const auto& v) {
        using P = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<P, OneCycleParams>) {
          p["pct_start"] = v.pct_start;
          p["div_factor"] = v.div_factor;
          p["final_div_factor"] = v.final_div_factor;
        } else if constexpr (std::is_same_v<P, PlateauParams>) {
          p["factor"] = v.factor;
          p["patience"] = v.patience;
        } else if constexpr (std::is_same_v<P, CosineWarmParams>) {
          p["t0"] = v.t0;
          p["t_mult"] = v.t_mult;
        } else if constexpr (std::is_same_v<P, StepParams>) {
          p["step_size"] = v.step_size;
        } else if constexpr (std::is_same_v<P, PolyParams>) {
          p["power"] = v.power;
        }
      },
      c.scheduler_params);
  j["scheduler_params"] = std::move(p);
  return j;
}

/// Parses the canonical object. Structural problems throw; grid membership is
/// left to validate().
inline Configuration config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys = {
      "lora_enabled", "lora_rank", "lora_dropout", "weight_decay",     "learning_rate",
      "aug_hflip",    "aug_vflip", "aug_rotate",   "scheduler",        "scheduler_params"};
  if (!j.is_object()) throw std::invalid_argument("configuration must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) throw std::invalid_argument("unknown configuration field '" + key + "'");
  }
  Configuration c;
  c.lora_enabled = j.at("lora_enabled").get<bool>();
  if (j.contains("lora_rank")) c.lora_rank = j.at("lora_rank").get<int>();
  if (j.contains("lora_dropout")) c.lora_dropout = j.at("lora_dropout").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.aug_hflip = j.at("aug_hflip").get<bool>();
  c.aug_vflip = j.at("aug_vflip").get<bool>();
  c.aug_rotate = j.at("aug_rotate").get<bool>();
  const auto name = j.at("scheduler").get<std::string>();
  auto sched = parse_scheduler(name);
  if (!sched) throw std::invalid_argument("unknown scheduler '" + name + "'");
  c.scheduler = *sched;
  const auto& p = j.at("scheduler_params");
  // The params object carries no tag of its own; infer it from its keys so a
  // mismatched pair survives parsing and is reported by validate().
  if (p.contains("pct_start")) {
    c.scheduler_params = OneCycleParams{p.at("pct_start").get<double>(), p.at("div_factor").get<int>(),
                                        p.at("final_div_factor").get<int>()};
  } else if (p.contains("factor")) {
    c.scheduler_params = PlateauParams{p.at("factor").get<double>(), p.at("patience").get<int>()};
  } else if (p.contains("t0")) {
    c.scheduler_params = CosineWarmParams{p.at("t0").get<int>(), p.at("t_mult").get<int>()};
  } else if (p.contains("step_size")) {
    c.scheduler_params = StepParams{p.at("step_size").get<int>()};
  } else if (p.contains("power")) {
    c.scheduler_params = PolyParams{p.at("power").get<double>()};
  } else if (p.is_object() && p.empty()) {
    c.scheduler_params = CosineParams{};
  } else {
    throw std::invalid_argument("unrecognized scheduler_params");
  }
  return c;
}

/// Key-sorted compact JSON; the hashing input for config ids.
inline std::string canonical_json(const Configuration& c) { return to_json(c).dump(); }

}  // namespace qttseg

#endif  // QTTSEG_SEARCH_SPACE_HPP
