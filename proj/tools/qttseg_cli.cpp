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

// qttseg command line. Exit codes: 0 ok, 1 usage error, 2 runtime failure.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "qttseg/acquisition.hpp"
#include "qttseg/curve_store.hpp"
#include "qttseg/meta_features.hpp"
#include "qttseg/search_space.hpp"
#include "qttseg/synth_bench.hpp"
#include "qttseg/tuner.hpp"
#include "qttseg/worker.hpp"

namespace fs = std::filesystem;
using namespace qttseg;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t default_seed() {
  if (const char* s = std::getenv("QTT_SEED"); s && *s) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw UsageError(std::string("QTT_SEED is not an unsigned integer: '") + s + "'");
    }
  }
  return 0;
}

void require_file(const std::string& path, const std::string& flag) {
  if (!fs::is_regular_file(path)) throw UsageError(flag + ": no such file: " + path);
}

void require_dir(const std::string& path, const std::string& flag) {
  if (!fs::is_directory(path)) throw UsageError(flag + ": no such directory: " + path);
}

void require_writable_parent(const std::string& path, const std::string& flag) {
  const fs::path parent = fs::absolute(path).parent_path();
  if (!fs::is_directory(parent)) throw UsageError(flag + ": parent directory does not exist: " + parent.string());
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return nlohmann::json::parse(in);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<double> parse_budgets(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size() || !(v > 0)) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("--budgets: not a positive number: '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("--budgets: empty list");
  return out;
}

// --- dataset directories -----------------------------------------------------

struct PngData {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> gray;
};

PngData read_png(const fs::path& path, bool want_pixels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw std::runtime_error(path.string() + ": " + img.message);
  }
  PngData d;
  d.width = static_cast<int>(img.width);
  d.height = static_cast<int>(img.height);
  d.channels = (img.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
  if (!want_pixels) {
    png_image_free(&img);
    return d;
  }
  img.format = PNG_FORMAT_GRAY;
  d.gray.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, d.gray.data(), 0, nullptr)) {
    throw std::runtime_error(path.string() + ": " + img.message);
  }
  return d;
}

/// images/*.png + masks/*.png, filename-matched. Masks holding only 0 and 255
/// are binary; anything else is read as class indices.
MetaFeatures dataset_meta_features(const fs::path& root) {
  const fs::path masks_dir = root / "masks", images_dir = root / "images";
  if (!fs::is_directory(masks_dir)) throw std::runtime_error("dataset has no masks/ directory: " + root.string());
  std::vector<fs::path> masks;
  for (const auto& e : fs::directory_iterator(masks_dir)) {
    if (e.path().extension() == ".png") masks.push_back(e.path());
  }
  std::sort(masks.begin(), masks.end());
  if (masks.empty()) throw std::runtime_error("no mask PNGs under " + masks_dir.string());
  std::vector<PngData> raw;
  bool binary = true;
  for (const auto& m : masks) {
    raw.push_back(read_png(m, true));
    for (auto v : raw.back().gray) binary = binary && (v == 0 || v == 255);
  }
  std::vector<LabeledImage> data;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    LabeledImage li;
    li.height = raw[i].height;
    li.width = raw[i].width;
    const fs::path image = images_dir / masks[i].filename();
    li.channels = fs::exists(image) ? read_png(image, false).channels : 3;
    li.mask.reserve(raw[i].gray.size());
    for (auto v : raw[i].gray) li.mask.push_back(binary ? (v ? 1 : 0) : v);
    data.push_back(std::move(li));
  }
  return extract(data);
}

// --- subcommands ---------------------------------------------------------------

int cmd_count_space() {
  std::cout << enumerate_size() << '\n';
  return 0;
}

int cmd_sample(std::size_t n, std::uint64_t seed, const std::string& out) {
  if (!out.empty()) require_writable_parent(out, "--out");
  std::ostringstream os;
  for (const auto& c : sample(seed, n)) {
    os << nlohmann::json{{"config_id", config_id(c)}, {"config", to_json(c)}}.dump() << '\n';
  }
  if (out.empty()) {
    std::cout << os.str();
  } else {
    write_text(out, os.str());
  }
  return 0;
}

int cmd_gen_bench(std::size_t tasks, std::size_t pairs, std::uint64_t seed, const std::string& out) {
  require_writable_parent(out, "--out");
  const MetaDataset md = generate_meta_dataset(tasks, pairs, seed);
  md.store.save(out);
  write_text(out + ".meta.json", to_json(md.features).dump(2) + "\n");
  std::cout << "wrote " << md.store.size() << " records over " << tasks << " datasets to " << out << '\n';
  return 0;
}

struct MetaTrainArgs {
  std::string curves, meta, out;
  std::vector<std::string> exclude;
  int steps = 500;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

int cmd_meta_train(const MetaTrainArgs& a) {
  require_file(a.curves, "--curves");
  const std::string meta = a.meta.empty() ? a.curves + ".meta.json" : a.meta;
  require_file(meta, "--meta");
  require_writable_parent(a.out, "--out");
  if (a.steps < 0) throw UsageError("--steps must be >= 0");

  CurveStore store = CurveStore::load(a.curves);
  const MetaFeatureTable table = meta_table_from_json(read_json(meta));
  for (const auto& id : a.exclude) {
    if (!store.dataset_ids().count(id)) {
      std::clog << "qttseg: --exclude " << id << ": no curves for that dataset\n";
      continue;
    }
    store = store.lodo_split(id).first;
  }
  MetaTrainOptions opt;
  opt.steps = a.steps;
  opt.lr = a.lr;
  opt.seed = a.seed;
  const Checkpoint ckpt = meta_train(store, table, opt);
  ckpt.save(a.out);
  std::cout << "meta-trained on " << ckpt.dataset_ids.size() << " datasets, " << store.size()
            << " records; final val NLL " << ckpt.final_nll << ", cost MSE " << ckpt.final_cost_mse << '\n';
  return 0;
}

struct TuneArgs {
  std::string dataset, dataset_path, meta, checkpoint, worker = "mock", out, clock = "auto";
  double budget_s = 60.0;
  std::size_t pool = 128;
  std::uint64_t seed = 0;
  int subsample = 100;
};

/// Target meta-features: --meta file (a single record or a table keyed by
/// dataset id), else the dataset directory, else the surrogate task.
MetaFeatures target_meta_features(const std::string& dataset, const std::string& dataset_path,
                                  const std::string& meta, bool mock) {
  if (!meta.empty()) {
    const auto j = read_json(meta);
    if (j.contains("n_images")) return meta_features_from_json(j);
    const auto table = meta_table_from_json(j);
    auto it = table.find(dataset);
    if (it == table.end()) throw std::runtime_error("--meta has no entry for dataset '" + dataset + "'");
    return it->second;
  }
  if (!dataset_path.empty() && fs::is_directory(dataset_path)) return dataset_meta_features(dataset_path);
  if (mock) return SurrogateTask::named(dataset).meta_features();
  throw UsageError("tune: need --meta or a dataset directory in --dataset-path to describe the target");
}

std::unique_ptr<WorkerChannel> make_channel(const std::string& worker) {
  if (worker == "mock") return std::make_unique<MockWorker>();
  return std::make_unique<ProcessChannel>(worker);
}

ClockMode parse_clock(const std::string& clock, bool mock) {
  if (clock == "simulated") return ClockMode::Simulated;
  if (clock == "wall") return ClockMode::Wall;
  return mock ? ClockMode::Simulated : ClockMode::Wall;
}

int cmd_tune(const TuneArgs& a) {
  require_file(a.checkpoint, "--checkpoint");
  require_writable_parent(a.out, "--out");
  if (!a.meta.empty()) require_file(a.meta, "--meta");
  if (!(a.budget_s > 0)) throw UsageError("--budget-s must be > 0");
  if (a.pool < 1) throw UsageError("--pool must be >= 1");
  const bool mock = a.worker == "mock";

  const Checkpoint ckpt = Checkpoint::load(a.checkpoint);
  TuneRequest req;
  req.dataset_id = a.dataset;
  req.dataset_path = a.dataset_path.empty() ? a.dataset : a.dataset_path;
  req.budget_s = a.budget_s;
  req.pool_size = a.pool;
  req.seed = a.seed;
  req.subsample_n = a.subsample;
  req.clock = parse_clock(a.clock, mock);
  if (ckpt.trained_on(req.dataset_id)) throw LodoViolation(req.dataset_id);
  req.target_meta = target_meta_features(a.dataset, a.dataset_path, a.meta, mock);

  auto channel = make_channel(a.worker);
  WorkerClient client(*channel);
  const TuneResult res = tune(req, ckpt, client);
  try {
    client.shutdown();
  } catch (const WorkerError&) {
  }
  write_text(a.out, to_json(res).dump(2) + "\n");
  std::cout << res.dataset_id << ": incumbent " << res.incumbent_value() << " after " << res.trace.size()
            << " steps, " << res.ledger.total_s << " s (" << res.stop_reason << ")\n";
  return 0;
}

struct BenchArgs {
  std::string budgets = "60,120,180", report, results_dir, curves, meta, worker = "mock", data_root;
  int seeds = 5;
  std::size_t tasks = 13, pairs = 154, pool = 128;
  int steps = 500;
  std::uint64_t seed = 0;
};

int cmd_bench(const BenchArgs& a) {
  const std::vector<double> budgets = parse_budgets(a.budgets);
  if (a.seeds < 1) throw UsageError("--seeds must be >= 1");
  require_writable_parent(a.report, "--report");
  if (!a.results_dir.empty()) require_dir(a.results_dir, "--results-dir");
  if (!a.curves.empty()) require_file(a.curves, "--curves");
  if (!a.data_root.empty()) require_dir(a.data_root, "--data-root");
  const bool mock = a.worker == "mock";
  if (!mock && a.data_root.empty()) throw UsageError("bench: a real --worker needs --data-root");

  MetaDataset md;
  if (a.curves.empty()) {
    md = generate_meta_dataset(a.tasks, a.pairs, a.seed);
  } else {
    const std::string meta = a.meta.empty() ? a.curves + ".meta.json" : a.meta;
    require_file(meta, "--meta");
    md.store = CurveStore::load(a.curves);
    md.features = meta_table_from_json(read_json(meta));
  }
  const auto id_set = md.store.dataset_ids();
  const std::vector<std::string> datasets(id_set.begin(), id_set.end());
  std::vector<std::uint64_t> seeds;
  for (int s = 0; s < a.seeds; ++s) seeds.push_back(a.seed + static_cast<std::uint64_t>(s));

  // One LODO checkpoint per target dataset.
  std::map<std::string, Checkpoint> checkpoints;
  std::map<std::string, SummaryCell> zero_shot;
  nlohmann::json zero_shot_values = nlohmann::json::object();
  for (const auto& d : datasets) {
    MetaTrainOptions opt;
    opt.steps = a.steps;
    opt.seed = a.seed;
    checkpoints.emplace(d, meta_train(md.store.lodo_split(d).first, md.features, opt));
    auto channel = make_channel(a.worker);
    WorkerClient client(*channel);
    std::vector<double> zs;
    for (auto s : seeds) {
      const std::string path = mock ? d : (fs::path(a.data_root) / d).string();
      if (!client.init(path, 100, s).ok) continue;
      const WorkerResponse r = client.zero_shot();
      if (r.ok) zs.push_back(r.val_iou);
    }
    if (!zs.empty()) {
      zero_shot.emplace(d, summarize(zs));
      zero_shot_values[d] = zs;
    }
  }

  auto run = [&](const std::string& d, double budget, std::uint64_t s) {
    TuneRequest req;
    req.dataset_id = d;
    req.dataset_path = mock ? d : (fs::path(a.data_root) / d).string();
    req.target_meta = md.features.at(d);
    req.budget_s = budget;
    req.pool_size = a.pool;
    req.seed = s;
    req.clock = mock ? ClockMode::Simulated : ClockMode::Wall;
    auto channel = make_channel(a.worker);
    WorkerClient client(*channel);
    return tune(req, checkpoints.at(d), client);
  };
  std::vector<TuneResult> results;
  const BenchmarkReport rep = run_benchmark(datasets, budgets, seeds, run, zero_shot, &results);
  if (!a.results_dir.empty()) {
    for (const auto& r : results) {
      const std::string name = r.dataset_id + "_b" + std::to_string(std::llround(r.budget_s)) + "_s" +
                               std::to_string(r.seed) + ".json";
      write_text((fs::path(a.results_dir) / name).string(), to_json(r).dump(2) + "\n");
    }
    nlohmann::json zs = nlohmann::json::object();
    for (const auto& [d, c] : zero_shot) zs[d] = c.mean;
    write_text((fs::path(a.results_dir) / "zero_shot.json").string(), zs.dump(2) + "\n");
  }
  write_text(a.report, rep.to_markdown());
  std::cout << rep.to_markdown();
  return 0;
}

/// Zero-shot file: {"dataset": value} or {"dataset": [values...]}.
std::map<std::string, SummaryCell> read_zero_shot(const std::string& path) {
  std::map<std::string, SummaryCell> out;
  const nlohmann::json j = read_json(path);
  for (const auto& [id, v] : j.items()) {
    if (v.is_number()) {
      out.emplace(id, summarize({v.get<double>()}));
    } else {
      out.emplace(id, summarize(v.get<std::vector<double>>()));
    }
  }
  return out;
}

int cmd_report(const std::string& results_dir, const std::string& zero_shot_file, const std::string& out) {
  require_dir(results_dir, "--results");
  if (!zero_shot_file.empty()) require_file(zero_shot_file, "--zero-shot");
  if (!out.empty()) require_writable_parent(out, "--out");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(results_dir)) {
    if (e.path().extension() == ".json" && e.path().filename() != "zero_shot.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<TuneResult> results;
  std::set<double> budgets;
  for (const auto& f : files) {
    results.push_back(tune_result_from_json(read_json(f.string())));
    budgets.insert(results.back().budget_s);
  }
  if (results.empty()) throw std::runtime_error("no result files under " + results_dir);
  const auto zs = zero_shot_file.empty() ? std::map<std::string, SummaryCell>{} : read_zero_shot(zero_shot_file);
  const std::string md = aggregate_results(results, {budgets.begin(), budgets.end()}, zs).to_markdown();
  if (out.empty()) {
    std::cout << md;
  } else {
    write_text(out, md);
  }
  return 0;
}

/// Serves the wire protocol on stdin/stdout from surrogate tasks.
int cmd_mock_worker(const std::vector<std::string>& failing, double step_cost) {
  MockWorker::Options opt;
  opt.failing_config_ids.insert(failing.begin(), failing.end());
  if (step_cost > 0) opt.fixed_step_cost_s = step_cost;
  MockWorker worker(opt);
  std::string line;
  while (std::getline(std::cin, line)) {
    if (line.empty()) continue;
    std::cout << worker.exchange(line) << std::endl;
    if (line.find("\"shutdown\"") != std::string::npos) break;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qttseg: budgeted, meta-learned hyperparameter tuning for segmentation fine-tuning"};
  app.require_subcommand(1);
  std::uint64_t env_seed = 0;
  try {
    env_seed = default_seed();
  } catch (const UsageError& e) {
    std::cerr << "qttseg: " << e.what() << '\n';
    return 1;
  }

  app.add_subcommand("count-space", "print the number of distinct configurations");

  std::size_t sample_n = 10;
  std::uint64_t sample_seed = env_seed;
  std::string sample_out;
  auto* sample_cmd = app.add_subcommand("sample", "sample configurations as JSONL");
  sample_cmd->add_option("--n", sample_n, "number of configurations")->check(CLI::PositiveNumber);
  sample_cmd->add_option("--seed", sample_seed, "seed (default $QTT_SEED or 0)");
  sample_cmd->add_option("--out", sample_out, "output file (default stdout)");

  std::size_t gen_tasks = 13, gen_pairs = 154;
  std::uint64_t gen_seed = env_seed;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-bench", "generate a synthetic curve store and meta-feature table");
  gen_cmd->add_option("--tasks", gen_tasks, "number of synthetic datasets")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--pairs", gen_pairs, "configurations per dataset")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen_seed, "seed");
  gen_cmd->add_option("--out", gen_out, "curve store JSONL; meta-features go to <out>.meta.json")->required();

  MetaTrainArgs mt;
  mt.seed = env_seed;
  auto* mt_cmd = app.add_subcommand("meta-train", "fit the performance and cost predictors");
  mt_cmd->add_option("--curves", mt.curves, "curve store JSONL")->required();
  mt_cmd->add_option("--meta", mt.meta, "meta-feature table (default <curves>.meta.json)");
  mt_cmd->add_option("--exclude", mt.exclude, "dataset_id to leave out (repeatable)");
  mt_cmd->add_option("--out", mt.out, "checkpoint path")->required();
  mt_cmd->add_option("--steps", mt.steps, "optimization steps");
  mt_cmd->add_option("--lr", mt.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  mt_cmd->add_option("--seed", mt.seed, "seed");

  TuneArgs tu;
  tu.seed = env_seed;
  auto* tune_cmd = app.add_subcommand("tune", "tune one dataset under a time budget");
  tune_cmd->add_option("--dataset", tu.dataset, "target dataset_id")->required();
  tune_cmd->add_option("--dataset-path", tu.dataset_path, "dataset directory sent to the worker");
  tune_cmd->add_option("--meta", tu.meta, "target meta-features JSON");
  tune_cmd->add_option("--budget-s", tu.budget_s, "time budget in seconds");
  tune_cmd->add_option("--pool", tu.pool, "candidate pool size");
  tune_cmd->add_option("--seed", tu.seed, "seed");
  tune_cmd->add_option("--subsample", tu.subsample, "images subsampled by the worker");
  tune_cmd->add_option("--checkpoint", tu.checkpoint, "meta-trained checkpoint")->required();
  tune_cmd->add_option("--worker", tu.worker, "worker command, or 'mock'");
  tune_cmd->add_option("--clock", tu.clock, "simulated|wall|auto")
      ->check(CLI::IsMember({"simulated", "wall", "auto"}));
  tune_cmd->add_option("--out", tu.out, "result JSON path")->required();

  BenchArgs be;
  be.seed = env_seed;
  auto* bench_cmd = app.add_subcommand("bench", "LODO benchmark over every dataset, budget and seed");
  bench_cmd->add_option("--budgets", be.budgets, "comma-separated budgets in seconds");
  bench_cmd->add_option("--seeds", be.seeds, "seeds per (dataset, budget)");
  bench_cmd->add_option("--report", be.report, "Markdown table path")->required();
  bench_cmd->add_option("--results-dir", be.results_dir, "also write every result JSON here");
  bench_cmd->add_option("--curves", be.curves, "curve store (default: generate a synthetic one)");
  bench_cmd->add_option("--meta", be.meta, "meta-feature table for --curves");
  bench_cmd->add_option("--tasks", be.tasks, "synthetic datasets")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--pairs", be.pairs, "synthetic configurations per dataset")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--steps", be.steps, "meta-training steps per checkpoint");
  bench_cmd->add_option("--pool", be.pool, "candidate pool size");
  bench_cmd->add_option("--worker", be.worker, "worker command, or 'mock'");
  bench_cmd->add_option("--data-root", be.data_root, "directory holding one dataset directory per id");
  bench_cmd->add_option("--seed", be.seed, "base seed");

  std::string rep_results, rep_zero_shot, rep_out;
  auto* report_cmd = app.add_subcommand("report", "aggregate result JSON files into a Markdown table");
  report_cmd->add_option("--results", rep_results, "directory of result JSON files")->required();
  report_cmd->add_option("--zero-shot", rep_zero_shot, "zero-shot values JSON");
  report_cmd->add_option("--out", rep_out, "output path (default stdout)");

  std::vector<std::string> mw_fail;
  double mw_cost = 0.0;
  auto* mock_cmd = app.add_subcommand("mock-worker", "");  // hidden: empty description
  mock_cmd->group("");
  mock_cmd->add_option("--fail-config", mw_fail, "config_id whose steps fail");
  mock_cmd->add_option("--step-cost", mw_cost, "fixed reported seconds per step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand("count-space")) return cmd_count_space();
    if (*sample_cmd) return cmd_sample(sample_n, sample_seed, sample_out);
    if (*gen_cmd) return cmd_gen_bench(gen_tasks, gen_pairs, gen_seed, gen_out);
    if (*mt_cmd) return cmd_meta_train(mt);
    if (*tune_cmd) return cmd_tune(tu);
    if (*bench_cmd) return cmd_bench(be);
    if (*report_cmd) return cmd_report(rep_results, rep_zero_shot, rep_out);
    if (*mock_cmd) return cmd_mock_worker(mw_fail, mw_cost);
  } catch (const UsageError& e) {
    std::cerr << "qttseg: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "qttseg: error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
