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

#ifndef QTTSEG_TUNER_HPP
#define QTTSEG_TUNER_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "qttseg/acquisition.hpp"
#include "qttseg/curve_store.hpp"
#include "qttseg/meta_features.hpp"
#include "qttseg/predictors.hpp"
#include "qttseg/search_space.hpp"
#include "qttseg/worker.hpp"

namespace qttseg {

// ---------------------------------------------------------------------------
// Checkpoint

/// Meta-trained predictors plus what tuning needs to use them: the meta
/// statistics, the GP conditioning reservoir and the datasets trained on.
struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  PerfPredictor perf;
  CostPredictor cost;
  MetaStats meta_stats;
  std::vector<std::string> dataset_ids;  // sorted
  Eigen::MatrixXd reservoir_inputs;
  Eigen::VectorXd reservoir_targets;
  double final_nll = 0.0;
  double final_cost_mse = 0.0;
  int steps = 0;
  std::uint64_t seed = 0;

  bool trained_on(const std::string& dataset_id) const {
    return std::binary_search(dataset_ids.begin(), dataset_ids.end(), dataset_id);
  }

  nlohmann::json to_json() const {
    nlohmann::json res_inputs = nlohmann::json::array();
    for (Eigen::Index r = 0; r < reservoir_inputs.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(reservoir_inputs.cols()));
      for (Eigen::Index c = 0; c < reservoir_inputs.cols(); ++c) row[static_cast<std::size_t>(c)] = reservoir_inputs(r, c);
      res_inputs.push_back(std::move(row));
    }
    return {{"format_version", kFormatVersion},
            {"input_dim", perf.input_dim()},
            {"dataset_ids", dataset_ids},
            {"meta_stats", qttseg::to_json(meta_stats)},
            {"perf", {{"feature_extractor", qttseg::to_json(perf.feature_extractor)},
                      {"kernel", qttseg::to_json(perf.kernel)}}},
            {"cost", {{"mlp", qttseg::to_json(cost.mlp)}}},
            {"reservoir", {{"inputs", std::move(res_inputs)},
                           {"targets", std::vector<double>(reservoir_targets.data(),
                                                           reservoir_targets.data() + reservoir_targets.size())}}},
            {"metadata", {{"final_nll", final_nll}, {"final_cost_mse", final_cost_mse},
                          {"steps", steps}, {"seed", seed}}}};
  }

  static Checkpoint from_json(const nlohmann::json& j) {
    if (j.at("format_version").get<int>() != kFormatVersion) throw std::runtime_error("unsupported checkpoint version");
    Checkpoint c;
    c.dataset_ids = j.at("dataset_ids").get<std::vector<std::string>>();
    std::sort(c.dataset_ids.begin(), c.dataset_ids.end());
    c.meta_stats = meta_stats_from_json(j.at("meta_stats"));
    c.perf = PerfPredictor(mlp_from_json(j.at("perf").at("feature_extractor")),
                           kernel_params_from_json(j.at("perf").at("kernel")));
    c.cost = CostPredictor(mlp_from_json(j.at("cost").at("mlp")));
    const auto& res = j.at("reservoir");
    const auto targets = res.at("targets").get<std::vector<double>>();
    const auto& rows = res.at("inputs");
    c.reservoir_inputs.resize(static_cast<Eigen::Index>(rows.size()), c.perf.input_dim());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto row = rows[r].get<std::vector<double>>();
      if (static_cast<Eigen::Index>(row.size()) != c.perf.input_dim()) throw std::runtime_error("reservoir row width");
      for (std::size_t k = 0; k < row.size(); ++k) c.reservoir_inputs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = row[k];
    }
    if (targets.size() != rows.size()) throw std::runtime_error("reservoir target count");
    c.reservoir_targets = Eigen::Map<const Eigen::VectorXd>(targets.data(), static_cast<Eigen::Index>(targets.size()));
    const auto& md = j.at("metadata");
    c.final_nll = md.at("final_nll").get<double>();
    c.final_cost_mse = md.at("final_cost_mse").get<double>();
    c.steps = md.at("steps").get<int>();
    c.seed = md.at("seed").get<std::uint64_t>();
    c.perf.condition(c.reservoir_inputs, c.reservoir_targets);
    return c;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out << to_json().dump() << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    return from_json(nlohmann::json::parse(in));
  }
};

// ---------------------------------------------------------------------------
// Meta-training

struct MetaTrainOptions {
  int steps = 500;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  Eigen::Index batch_size = 256;
  Eigen::Index reservoir_size = 256;
};

/// Fits both predictors on every record of `store`. The perf predictor's
/// validation batch doubles as the tuning-time conditioning reservoir.
inline Checkpoint meta_train(const CurveStore& store, const MetaFeatureTable& meta, const MetaTrainOptions& opt) {
  if (store.empty()) throw std::invalid_argument("meta_train: empty curve store");
  Checkpoint ckpt;
  const auto ids = store.dataset_ids();
  std::vector<MetaFeatures> feats;
  for (const auto& id : ids) {
    auto it = meta.find(id);
    if (it == meta.end()) throw std::invalid_argument("meta_train: no meta-features for dataset '" + id + "'");
    feats.push_back(it->second);
  }
  ckpt.dataset_ids.assign(ids.begin(), ids.end());
  ckpt.meta_stats = fit_stats(feats);
  const TrainingSet ts = build_training_set(store, meta, ckpt.meta_stats);
  const int dim = static_cast<int>(ts.inputs.cols());

  FitOptions fo;
  fo.steps = opt.steps;
  fo.lr = opt.lr;
  fo.seed = opt.seed;
  fo.batch_size = opt.batch_size;
  fo.validation_size = opt.reservoir_size;
  auto perf = fit_perf(ts, PerfPredictor::fresh(dim, opt.seed), fo);
  fo.seed = opt.seed + 1;
  auto cost = fit_cost(ts, CostPredictor::fresh(dim, opt.seed + 1), fo);

  ckpt.perf = std::move(perf.predictor);
  ckpt.cost = std::move(cost.predictor);
  const TrainingSet reservoir = ts.subset(perf.validation_rows);
  ckpt.reservoir_inputs = reservoir.inputs;
  ckpt.reservoir_targets = reservoir.val_iou;
  ckpt.final_nll = perf.final_loss;
  ckpt.final_cost_mse = cost.final_loss;
  ckpt.steps = opt.steps;
  ckpt.seed = opt.seed;
  return ckpt;
}

// ---------------------------------------------------------------------------
// Tuning

enum class ClockMode { Simulated, Wall };

struct TuneRequest {
  std::string dataset_id;
  std::string dataset_path;  // sent to the worker's init; defaults to dataset_id
  MetaFeatures target_meta;
  double budget_s = 60.0;
  std::size_t pool_size = 128;
  std::uint64_t seed = 0;
  int subsample_n = 100;
  ClockMode clock = ClockMode::Simulated;
  /// Charged per decision in simulated mode (wall mode measures it).
  double simulated_overhead_s = 0.0;
};

struct TraceEntry {
  std::string config_id;
  int epoch = 0;
  bool ok = true;
  double val_iou = 0.0;
  double cost_s = 0.0;
  double clock_s = 0.0;  // elapsed budget when the decision was taken
  double predicted_cost_s = 0.0;
  double score = 0.0;
  double incumbent = 0.0;  // after this step
  std::string message;
};

struct BudgetLedger {
  double selection_overhead_s = 0.0;
  double worker_time_s = 0.0;
  double idle_s = 0.0;
  double total_s = 0.0;
};

struct Incumbent {
  std::string config_id;
  Configuration config;
  double val_iou = 0.0;
  int epoch = 0;
};

struct TuneResult {
  std::string dataset_id;
  double budget_s = 0.0;
  std::uint64_t seed = 0;
  std::size_t pool_size = 0;
  std::optional<Incumbent> incumbent;
  std::vector<TraceEntry> trace;
  BudgetLedger ledger;
  std::string stop_reason;
  std::map<std::string, Configuration> configs;  // every config that appears in the trace

  double incumbent_value() const { return incumbent ? incumbent->val_iou : 0.0; }
};

class LodoViolation : public std::runtime_error {
 public:
  explicit LodoViolation(const std::string& id)
      : std::runtime_error("checkpoint was meta-trained on target dataset '" + id +
                           "'; re-run meta-train with --exclude " + id) {}
};

namespace detail {

class RunClock {
 public:
  explicit RunClock(ClockMode mode) : mode_(mode), start_(std::chrono::steady_clock::now()) {}

  double elapsed() const {
    if (mode_ == ClockMode::Simulated) return simulated_;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  void charge(double seconds) {
    if (mode_ == ClockMode::Simulated) simulated_ += seconds;
  }
  ClockMode mode() const { return mode_; }

 private:
  ClockMode mode_;
  std::chrono::steady_clock::time_point start_;
  double simulated_ = 0.0;
};

}  // namespace detail

/// Budgeted one-epoch-at-a-time tuning loop. Each iteration re-conditions
/// the GP on the reservoir plus this run's observations, picks the best
/// EI-per-cost action, and dispatches it unless its predicted cost exceeds
/// 90% of the remaining budget.
inline TuneResult tune(const TuneRequest& req, const Checkpoint& ckpt, WorkerClient& worker) {
  if (!(req.budget_s > 0.0)) throw std::invalid_argument("tune: budget_s must be > 0");
  if (req.pool_size < 1) throw std::invalid_argument("tune: pool_size must be >= 1");
  if (ckpt.trained_on(req.dataset_id)) throw LodoViolation(req.dataset_id);

  TuneResult res;
  res.dataset_id = req.dataset_id;
  res.budget_s = req.budget_s;
  res.seed = req.seed;
  res.pool_size = req.pool_size;

  detail::RunClock clock(req.clock);
  RunState state = RunState::from_pool(sample(req.seed, req.pool_size));
  const std::vector<double> meta = normalize(req.target_meta, ckpt.meta_stats);

  const WorkerResponse hello =
      worker.init(req.dataset_path.empty() ? req.dataset_id : req.dataset_path, req.subsample_n, req.seed);
  if (!hello.ok) throw WorkerError("worker init failed: " + hello.message);

  PerfPredictor perf = ckpt.perf;
  std::vector<PredictorInput> obs_inputs;
  std::vector<double> obs_targets;
  double overhead = 0.0, worker_time = 0.0;

  for (;;) {
    if (clock.elapsed() >= req.budget_s) {
      res.stop_reason = "budget";
      break;
    }
    const double sel_start = clock.elapsed();
    const auto open = state.open_actions();
    if (open.empty()) {
      res.stop_reason = "pool exhausted";
      break;
    }
    const Eigen::MatrixXd obs_x = stack_inputs(obs_inputs);
    Eigen::MatrixXd cond_x(ckpt.reservoir_inputs.rows() + obs_x.rows(), perf.input_dim());
    Eigen::VectorXd cond_y(cond_x.rows());
    cond_x << ckpt.reservoir_inputs, obs_x;
    cond_y << ckpt.reservoir_targets,
        Eigen::Map<const Eigen::VectorXd>(obs_targets.data(), static_cast<Eigen::Index>(obs_targets.size()));
    perf.condition(cond_x, cond_y);
    const ScoredAction pick = score_candidates(perf, ckpt.cost, state.incumbent.value_or(0.0), open, meta).front();
    clock.charge(req.simulated_overhead_s);
    const double decided_at = clock.elapsed();
    overhead += decided_at - sel_start;

    const double remaining = req.budget_s - decided_at;
    if (pick.predicted_cost > 0.9 * remaining) {
      res.stop_reason = "budget";
      break;
    }

    const auto t0 = std::chrono::steady_clock::now();
    WorkerResponse resp;
    try {
      resp = worker.step(pick.action.config, pick.action.next_epoch, pick.action.config_id);
    } catch (const WorkerError& e) {
      resp = WorkerResponse{false, 0.0, 0.0, e.what()};
    }
    const double measured = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double step_cost = clock.mode() == ClockMode::Simulated ? resp.wall_clock_s : measured;
    clock.charge(step_cost);
    worker_time += step_cost;

    auto entry = std::find_if(state.pool.begin(), state.pool.end(),
                              [&](const RunState::Entry& e) { return e.config_id == pick.action.config_id; });
    TraceEntry t;
    t.config_id = pick.action.config_id;
    t.epoch = pick.action.next_epoch;
    t.ok = resp.ok;
    t.cost_s = step_cost;
    t.clock_s = decided_at;
    t.predicted_cost_s = pick.predicted_cost;
    t.score = pick.score;
    t.message = resp.message;
    res.configs.emplace(pick.action.config_id, pick.action.config);
    if (resp.ok) {
      obs_inputs.push_back(featurize(entry->config, meta, t.epoch, entry->history));
      obs_targets.push_back(resp.val_iou);
      entry->history.push_back(resp.val_iou);
      t.val_iou = resp.val_iou;
      if (!state.incumbent || resp.val_iou > *state.incumbent) {
        state.incumbent = resp.val_iou;
        res.incumbent = Incumbent{entry->config_id, entry->config, resp.val_iou, t.epoch};
      }
    } else {
      entry->quarantined = true;
    }
    t.incumbent = state.incumbent.value_or(0.0);
    res.trace.push_back(std::move(t));
  }

  res.ledger.selection_overhead_s = overhead;
  res.ledger.worker_time_s = worker_time;
  res.ledger.total_s = clock.elapsed();
  res.ledger.idle_s = std::max(0.0, res.ledger.total_s - overhead - worker_time);
  return res;
}

inline nlohmann::json to_json(const TuneResult& r) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& t : r.trace) {
    nlohmann::json e = {{"config_id", t.config_id}, {"epoch", t.epoch},
                        {"status", t.ok ? "ok" : "failed"}, {"val_iou", t.val_iou},
                        {"cost_s", t.cost_s}, {"clock_s", t.clock_s},
                        {"predicted_cost_s", t.predicted_cost_s}, {"score", t.score},
                        {"incumbent", t.incumbent}};
    if (!t.message.empty()) e["message"] = t.message;
    trace.push_back(std::move(e));
  }
  nlohmann::json configs = nlohmann::json::object();
  for (const auto& [id, c] : r.configs) configs[id] = to_json(c);
  nlohmann::json inc = nullptr;
  if (r.incumbent) {
    inc = {{"config_id", r.incumbent->config_id}, {"config", to_json(r.incumbent->config)},
           {"val_iou", r.incumbent->val_iou}, {"epoch", r.incumbent->epoch}};
  }
  return {{"dataset_id", r.dataset_id},
          {"budget_s", r.budget_s},
          {"seed", r.seed},
          {"pool_size", r.pool_size},
          {"incumbent", std::move(inc)},
          {"trace", std::move(trace)},
          {"configs", std::move(configs)},
          {"ledger", {{"selection_overhead_s", r.ledger.selection_overhead_s},
                      {"worker_time_s", r.ledger.worker_time_s},
                      {"idle_s", r.ledger.idle_s},
                      {"total_s", r.ledger.total_s}}},
          {"stop_reason", r.stop_reason}};
}

inline TuneResult tune_result_from_json(const nlohmann::json& j) {
  TuneResult r;
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.budget_s = j.at("budget_s").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.pool_size = j.at("pool_size").get<std::size_t>();
  if (!j.at("incumbent").is_null()) {
    const auto& inc = j.at("incumbent");
    r.incumbent = Incumbent{inc.at("config_id").get<std::string>(), config_from_json(inc.at("config")),
                            inc.at("val_iou").get<double>(), inc.at("epoch").get<int>()};
  }
  for (const auto& e : j.at("trace")) {
    TraceEntry t;
    t.config_id = e.at("config_id").get<std::string>();
    t.epoch = e.at("epoch").get<int>();
    t.ok = e.at("status").get<std::string>() == "ok";
    t.val_iou = e.at("val_iou").get<double>();
    t.cost_s = e.at("cost_s").get<double>();
    t.clock_s = e.at("clock_s").get<double>();
    t.predicted_cost_s = e.at("predicted_cost_s").get<double>();
    t.score = e.at("score").get<double>();
    t.incumbent = e.at("incumbent").get<double>();
    t.message = e.value("message", std::string());
    r.trace.push_back(std::move(t));
  }
  for (const auto& [id, c] : j.at("configs").items()) r.configs.emplace(id, config_from_json(c));
  const auto& l = j.at("ledger");
  r.ledger = {l.at("selection_overhead_s").get<double>(), l.at("worker_time_s").get<double>(),
              l.at("idle_s").get<double>(), l.at("total_s").get<double>()};
  r.stop_reason = j.at("stop_reason").get<std::string>();
  return r;
}

// ---------------------------------------------------------------------------
// Benchmark tables

struct SummaryCell {
  double mean = 0.0;
  double stddev = 0.0;
  int runs = 0;
  bool failed = false;
};

/// Population mean and standard deviation.
inline SummaryCell summarize(const std::vector<double>& values) {
  SummaryCell c;
  c.runs = static_cast<int>(values.size());
  if (values.empty()) {
    c.failed = true;
    return c;
  }
  for (double v : values) c.mean += v;
  c.mean /= values.size();
  double var = 0.0;
  for (double v : values) var += (v - c.mean) * (v - c.mean);
  c.stddev = std::sqrt(var / values.size());
  return c;
}

/// "0.850_{0.031}"
inline std::string format_cell(const SummaryCell& c) {
  if (c.failed) return "failed";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f_{%.3f}", c.mean, c.stddev);
  return buf;
}

struct BenchmarkRow {
  std::string dataset_id;
  std::optional<SummaryCell> zero_shot;
  std::vector<SummaryCell> cells;  // one per budget
};

struct BenchmarkReport {
  std::vector<double> budgets;
  std::vector<BenchmarkRow> rows;

  /// Rows ranked by gain over zero-shot at the first budget; rows without a
  /// zero-shot value or with a failed first cell go last.
  void sort_by_gain() {
    auto gain = [](const BenchmarkRow& r) -> std::optional<double> {
      if (!r.zero_shot || r.cells.empty() || r.cells.front().failed) return std::nullopt;
      return r.cells.front().mean - r.zero_shot->mean;
    };
    std::stable_sort(rows.begin(), rows.end(), [&](const BenchmarkRow& a, const BenchmarkRow& b) {
      const auto ga = gain(a), gb = gain(b);
      if (ga.has_value() != gb.has_value()) return ga.has_value();
      if (ga && *ga != *gb) return *ga > *gb;
      return a.dataset_id < b.dataset_id;
    });
  }

  std::string to_markdown() const {
    std::ostringstream os;
    os << "| Dataset | Zero-shot |";
    for (double b : budgets) os << ' ' << static_cast<long long>(std::llround(b)) << " SEC |";
    os << "\n|---|---|";
    for (std::size_t i = 0; i < budgets.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& r : rows) {
      os << "| " << r.dataset_id << " | " << (r.zero_shot ? format_cell(*r.zero_shot) : "-") << " |";
      for (const auto& c : r.cells) os << ' ' << format_cell(c) << " |";
      os << '\n';
    }
    return os.str();
  }
};

/// Groups tuning results by (dataset, budget) into a sorted report.
inline BenchmarkReport aggregate_results(const std::vector<TuneResult>& results, std::vector<double> budgets,
                                         const std::map<std::string, SummaryCell>& zero_shot) {
  std::sort(budgets.begin(), budgets.end());
  budgets.erase(std::unique(budgets.begin(), budgets.end()), budgets.end());
  std::map<std::string, std::map<double, std::vector<double>>> grouped;
  for (const auto& r : results) grouped[r.dataset_id][r.budget_s].push_back(r.incumbent_value());
  for (const auto& [id, _] : zero_shot) grouped[id];
  BenchmarkReport rep;
  rep.budgets = budgets;
  for (const auto& [id, by_budget] : grouped) {
    BenchmarkRow row;
    row.dataset_id = id;
    if (auto it = zero_shot.find(id); it != zero_shot.end()) row.zero_shot = it->second;
    for (double b : budgets) {
      auto it = by_budget.find(b);
      row.cells.push_back(summarize(it == by_budget.end() ? std::vector<double>{} : it->second));
    }
    rep.rows.push_back(std::move(row));
  }
  rep.sort_by_gain();
  return rep;
}

/// Runs every (dataset, budget, seed) through `run`. A throwing run marks its
/// cell failed; the rest continue.
inline BenchmarkReport run_benchmark(
    const std::vector<std::string>& datasets, const std::vector<double>& budgets,
    const std::vector<std::uint64_t>& seeds,
    const std::function<TuneResult(const std::string&, double, std::uint64_t)>& run,
    const std::map<std::string, SummaryCell>& zero_shot, std::vector<TuneResult>* all_results = nullptr) {
  if (datasets.empty() || budgets.empty() || seeds.empty()) {
    throw std::invalid_argument("run_benchmark: need at least one dataset, budget and seed");
  }
  std::vector<TuneResult> results;
  std::set<std::pair<std::string, double>> failed;
  for (const auto& d : datasets) {
    for (double b : budgets) {
      for (auto s : seeds) {
        try {
          results.push_back(run(d, b, s));
        } catch (const std::exception& e) {
          std::clog << "qttseg: run " << d << " budget=" << b << " seed=" << s << " failed: " << e.what() << '\n';
          failed.emplace(d, b);
        }
      }
    }
  }
  BenchmarkReport rep = aggregate_results(results, budgets, zero_shot);
  for (auto& row : rep.rows) {
    for (std::size_t i = 0; i < rep.budgets.size(); ++i) {
      if (failed.count({row.dataset_id, rep.budgets[i]})) row.cells[i].failed = true;
    }
  }
  // Datasets whose every run failed still get a row.
  for (const auto& d : datasets) {
    if (std::none_of(rep.rows.begin(), rep.rows.end(), [&](const BenchmarkRow& r) { return r.dataset_id == d; })) {
      BenchmarkRow row{d, std::nullopt, std::vector<SummaryCell>(rep.budgets.size(), SummaryCell{0, 0, 0, true})};
      rep.rows.push_back(std::move(row));
    }
  }
  rep.sort_by_gain();
  if (all_results) *all_results = std::move(results);
  return rep;
}

}  // namespace qttseg

#endif  // QTTSEG_TUNER_HPP
