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

// Performance predictor (deep-kernel GP: MLP feature map + Matern-5/2 GP on
// the 16-d latent) and cost predictor (MLP on log epoch cost). All gradients
// are hand-derived; grad_check_* compare them to central differences.

#ifndef QTTSEG_PREDICTORS_HPP
#define QTTSEG_PREDICTORS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "qttseg/curve_store.hpp"
#include "qttseg/meta_features.hpp"
#include "qttseg/mlp.hpp"
#include "qttseg/search_space.hpp"

namespace qttseg {

// ---------------------------------------------------------------------------
// Inputs

inline constexpr std::size_t kCurveSummaryDim = 4;
inline constexpr std::size_t kPredictorInputDim = kConfigDim + MetaFeatures::kDim + 1 + kCurveSummaryDim;

struct PredictorInput {
  ConfigVector config_vec;
  std::vector<double> meta_vec;
  double fidelity = 0.1;  // epoch / 10
  // last, best, last - previous, observed epochs / 10
  std::array<double, kCurveSummaryDim> curve_summary{};

  Eigen::RowVectorXd flatten() const {
    Eigen::RowVectorXd row(static_cast<Eigen::Index>(config_vec.size() + meta_vec.size() + 1 +
                                                     kCurveSummaryDim));
    Eigen::Index at = 0;
    for (double v : config_vec) row(at++) = v;
    for (double v : meta_vec) row(at++) = v;
    row(at++) = fidelity;
    for (double v : curve_summary) row(at++) = v;
    return row;
  }
};

/// Assembles the predictor input for `config` evaluated at `epoch`, given the
/// values observed at epochs 1..history.size() of the same run.
inline PredictorInput featurize(const Configuration& config, std::span<const double> meta, int epoch,
                                std::span<const double> history) {
  if (epoch < 1 || epoch > kMaxEpochs) throw std::invalid_argument("featurize: epoch outside [1,10]");
  if (static_cast<int>(history.size()) >= epoch) {
    throw std::invalid_argument("featurize: history must precede the queried epoch");
  }
  PredictorInput in;
  in.config_vec = encode(config);
  in.meta_vec.assign(meta.begin(), meta.end());
  in.fidelity = epoch / static_cast<double>(kMaxEpochs);
  if (!history.empty()) {
    const double last = history.back();
    const double prev = history.size() > 1 ? history[history.size() - 2] : last;
    in.curve_summary = {last, *std::max_element(history.begin(), history.end()), last - prev,
                        static_cast<double>(history.size()) / kMaxEpochs};
  }
  return in;
}

inline Eigen::MatrixXd stack_inputs(const std::vector<PredictorInput>& inputs) {
  if (inputs.empty()) return Eigen::MatrixXd(0, static_cast<Eigen::Index>(kPredictorInputDim));
  const Eigen::Index d = inputs.front().flatten().size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(inputs.size()), d);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto row = inputs[i].flatten();
    if (row.size() != d) throw std::invalid_argument("stack_inputs: inconsistent input dimension");
    x.row(static_cast<Eigen::Index>(i)) = row;
  }
  return x;
}

/// Flattened meta-dataset: one row per curve record.
struct TrainingSet {
  Eigen::MatrixXd inputs;
  Eigen::VectorXd val_iou;
  Eigen::VectorXd log_cost;
  /// Source dataset and learning-curve index per row. Both empty when the
  /// rows carry no such structure (then batches are plain row samples).
  std::vector<int> group;
  std::vector<int> curve;

  Eigen::Index size() const { return inputs.rows(); }

  TrainingSet subset(const std::vector<Eigen::Index>& rows) const {
    TrainingSet s;
    s.inputs.resize(static_cast<Eigen::Index>(rows.size()), inputs.cols());
    s.val_iou.resize(static_cast<Eigen::Index>(rows.size()));
    s.log_cost.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      s.inputs.row(r) = inputs.row(rows[i]);
      s.val_iou(r) = val_iou(rows[i]);
      s.log_cost(r) = log_cost(rows[i]);
      if (!group.empty()) s.group.push_back(group[static_cast<std::size_t>(rows[i])]);
      if (!curve.empty()) s.curve.push_back(curve[static_cast<std::size_t>(rows[i])]);
    }
    return s;
  }
};

inline TrainingSet build_training_set(const CurveStore& store, const MetaFeatureTable& meta,
                                      const MetaStats& stats) {
  std::map<std::string, std::vector<double>> meta_vecs;
  std::map<std::string, int> group_of;
  for (const auto& id : store.dataset_ids()) {
    auto it = meta.find(id);
    if (it == meta.end()) throw std::invalid_argument("no meta-features for dataset '" + id + "'");
    meta_vecs[id] = normalize(it->second, stats);
    group_of.emplace(id, static_cast<int>(group_of.size()));
  }
  std::map<CurveStore::Key, std::vector<double>> histories;
  std::map<CurveStore::Key, int> curve_of;
  std::vector<PredictorInput> rows;
  TrainingSet ts;
  ts.val_iou.resize(static_cast<Eigen::Index>(store.size()));
  ts.log_cost.resize(static_cast<Eigen::Index>(store.size()));
  Eigen::Index i = 0;
  for (const auto& r : store.records()) {
    const CurveStore::Key key{r.dataset_id, r.config_id, r.seed};
    auto& h = histories[key];
    auto cid = curve_of.try_emplace(key, static_cast<int>(curve_of.size())).first->second;
    rows.push_back(featurize(r.config, meta_vecs.at(r.dataset_id), r.epoch, h));
    h.push_back(r.val_iou);
    ts.val_iou(i) = r.val_iou;
    ts.log_cost(i) = std::log(r.epoch_cost_s);
    ts.group.push_back(group_of.at(r.dataset_id));
    ts.curve.push_back(cid);
    ++i;
  }
  ts.inputs = stack_inputs(rows);
  return ts;
}

// ---------------------------------------------------------------------------
// Matern-5/2 kernel

inline constexpr double kNoiseFloor = 1e-6;

struct KernelParams {
  double log_lengthscale = 0.0;
  double log_signal_var = std::log(0.05);
  double log_noise_var = std::log(1e-3);

  double lengthscale() const { return std::exp(log_lengthscale); }
  double signal_var() const { return std::exp(log_signal_var); }
  /// Noise never drops below 1e-6.
  double noise_var() const { return kNoiseFloor + std::exp(log_noise_var); }

  bool operator==(const KernelParams&) const = default;
};

inline double matern52(double r, const KernelParams& kp) {
  const double u = std::sqrt(5.0) * r / kp.lengthscale();
  return kp.signal_var() * (1.0 + u + u * u / 3.0) * std::exp(-u);
}

/// Pairwise scaled distances u_ij = sqrt(5) * |a_i - b_j| / lengthscale.
inline Eigen::MatrixXd scaled_distances(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                        const KernelParams& kp) {
  const double scale = std::sqrt(5.0) / kp.lengthscale();
  Eigen::MatrixXd u(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      u(i, j) = scale * (a.row(i) - b.row(j)).norm();
    }
  }
  return u;
}

inline Eigen::MatrixXd matern52_from_scaled(const Eigen::MatrixXd& u, double signal_var) {
  return (signal_var * (1.0 + u.array() + u.array().square() / 3.0) * (-u.array()).exp()).matrix();
}

inline Eigen::MatrixXd matern52_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                       const KernelParams& kp) {
  return matern52_from_scaled(scaled_distances(a, b, kp), kp.signal_var());
}

struct Cholesky {
  Eigen::MatrixXd lower;
  double jitter = 0.0;
};

/// Cholesky of a symmetric matrix, escalating diagonal jitter 1e-8 .. 1e-4
/// when the plain factorization fails. Escalations are logged to std::clog.
inline Cholesky robust_cholesky(const Eigen::MatrixXd& k) {
  const Eigen::Index n = k.rows();
  for (double jitter : {0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4}) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(kj);
    if (llt.info() == Eigen::Success) {
      Eigen::MatrixXd l = llt.matrixL();
      if ((l.diagonal().array() > 0.0).all() && l.allFinite()) {
        if (jitter > 0.0) std::clog << "qttseg: cholesky jitter escalated to " << jitter << " (n=" << n << ")\n";
        return {std::move(l), jitter};
      }
    }
  }
  throw std::runtime_error("cholesky failed even with 1e-4 jitter");
}

/// GP negative log marginal likelihood of centred targets `y` at latent
/// points `z`, with gradients w.r.t. the latents and the three
/// log-hyperparameters (lengthscale, signal variance, noise variance).
struct GpLoss {
  double nll = 0.0;
  Eigen::MatrixXd grad_latent;
  Eigen::Vector3d grad_hyper = Eigen::Vector3d::Zero();
  double jitter = 0.0;
};

inline GpLoss gp_nll(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, const KernelParams& kp,
                     bool with_grad) {
  constexpr double kLog2Pi = 1.8378770664093453;
  const Eigen::Index n = z.rows();
  const Eigen::MatrixXd u = scaled_distances(z, z, kp);
  const Eigen::MatrixXd eu = (-u.array()).exp().matrix();
  const double sv = kp.signal_var();
  Eigen::MatrixXd k = (sv * (1.0 + u.array() + u.array().square() / 3.0) * eu.array()).matrix();
  Eigen::MatrixXd ky = k;
  ky.diagonal().array() += kp.noise_var();
  const Cholesky chol = robust_cholesky(ky);
  const auto tri = chol.lower.triangularView<Eigen::Lower>();
  Eigen::VectorXd alpha = tri.solve(y);
  tri.transpose().solveInPlace(alpha);

  GpLoss out;
  out.jitter = chol.jitter;
  out.nll = 0.5 * y.dot(alpha) + chol.lower.diagonal().array().log().sum() + 0.5 * n * kLog2Pi;
  if (!with_grad) return out;

  Eigen::MatrixXd kinv = Eigen::MatrixXd::Identity(n, n);
  tri.solveInPlace(kinv);
  tri.transpose().solveInPlace(kinv);
  const Eigen::MatrixXd w = kinv - alpha * alpha.transpose();

  // dk/dlog(l) = sv * e^-u * u^2 (1+u) / 3
  const Eigen::ArrayXXd dk_dlogl = sv * eu.array() * u.array().square() * (1.0 + u.array()) / 3.0;
  out.grad_hyper(0) = 0.5 * (w.array() * dk_dlogl).sum();
  out.grad_hyper(1) = 0.5 * (w.array() * k.array()).sum();
  out.grad_hyper(2) = 0.5 * w.trace() * std::exp(kp.log_noise_var);

  // dk(z_i, z_j)/dz_i = -(5 sv / (3 l^2)) (1+u) e^-u (z_i - z_j)
  const double l = kp.lengthscale();
  const double c = -5.0 * sv / (3.0 * l * l);
  const Eigen::MatrixXd m = (w.array() * c * (1.0 + u.array()) * eu.array()).matrix();
  out.grad_latent = m.rowwise().sum().asDiagonal() * z - m * z;
  return out;
}

// ---------------------------------------------------------------------------
// Performance predictor

struct Prediction {
  double mean = 0.0;
  double variance = 0.0;
};

/// Conditioning state of a fitted GP.
struct GpState {
  Eigen::MatrixXd inputs;
  Eigen::MatrixXd latents;
  Eigen::VectorXd targets;
  Eigen::MatrixXd chol_lower;  // of K + (noise + jitter) I
  Eigen::VectorXd alpha;
  double jitter = 0.0;
};

class PerfPredictor {
 public:
  static constexpr int kLatentDim = 16;
  static constexpr double kPriorMean = 0.5;

  Mlp feature_extractor;
  KernelParams kernel;

  PerfPredictor() = default;
  PerfPredictor(Mlp fx, KernelParams kp) : feature_extractor(std::move(fx)), kernel(kp) {}

  static PerfPredictor fresh(int input_dim, std::uint64_t seed) {
    return PerfPredictor(Mlp::standard(input_dim, kLatentDim, seed), KernelParams{});
  }

  int input_dim() const { return feature_extractor.input_dim(); }
  bool fitted() const { return state_.has_value(); }
  const std::optional<GpState>& state() const { return state_; }

  /// Factorizes K + noise I over the given observations.
  void condition(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
    if (x.rows() != y.size()) throw std::invalid_argument("condition: row/target mismatch");
    if (x.rows() == 0) {
      state_.reset();
      return;
    }
    GpState s;
    s.inputs = x;
    s.targets = y;
    s.latents = feature_extractor.forward(x);
    Eigen::MatrixXd ky = matern52_matrix(s.latents, s.latents, kernel);
    ky.diagonal().array() += kernel.noise_var();
    Cholesky chol = robust_cholesky(ky);
    s.jitter = chol.jitter;
    s.chol_lower = std::move(chol.lower);
    s.alpha = s.chol_lower.triangularView<Eigen::Lower>().solve((y.array() - kPriorMean).matrix());
    s.chol_lower.triangularView<Eigen::Lower>().transpose().solveInPlace(s.alpha);
    state_ = std::move(s);
  }

  void reset_conditioning() { state_.reset(); }

  /// Latent-function posterior. Without conditioning: (0.5, signal variance).
  std::vector<Prediction> predict(const Eigen::MatrixXd& x) const {
    if (x.cols() != input_dim()) throw std::invalid_argument("predict_perf: input dimension mismatch");
    std::vector<Prediction> out(static_cast<std::size_t>(x.rows()));
    const double sv = kernel.signal_var();
    if (!state_) {
      for (auto& p : out) p = {kPriorMean, sv};
      return out;
    }
    const Eigen::MatrixXd zq = feature_extractor.forward(x);
    const Eigen::MatrixXd ks = matern52_matrix(state_->latents, zq, kernel);  // n x m
    const Eigen::VectorXd mean = (ks.transpose() * state_->alpha).array() + kPriorMean;
    const Eigen::MatrixXd v = state_->chol_lower.triangularView<Eigen::Lower>().solve(ks);
    const Eigen::VectorXd reduction = v.colwise().squaredNorm().transpose();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      out[static_cast<std::size_t>(i)] = {mean(i), std::max(0.0, sv - reduction(i))};
    }
    return out;
  }

  /// NLL of `y` under the GP prior at inputs `x` (no conditioning state used).
  double nll(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) const {
    return gp_nll(feature_extractor.forward(x), (y.array() - kPriorMean).matrix(), kernel, false).nll;
  }

  Eigen::VectorXd parameters() const {
    Eigen::VectorXd p(feature_extractor.parameter_count() + 3);
    p.head(feature_extractor.parameter_count()) = feature_extractor.parameters();
    p.tail(3) << kernel.log_lengthscale, kernel.log_signal_var, kernel.log_noise_var;
    return p;
  }

  void set_parameters(const Eigen::VectorXd& p) {
    const Eigen::Index n = feature_extractor.parameter_count();
    feature_extractor.set_parameters(p.head(n));
    kernel.log_lengthscale = p(n);
    kernel.log_signal_var = p(n + 1);
    kernel.log_noise_var = p(n + 2);
    state_.reset();
  }

 private:
  std::optional<GpState> state_;
};

inline std::vector<Prediction> predict_perf(const PerfPredictor& p, const std::vector<PredictorInput>& inputs) {
  return p.predict(stack_inputs(inputs));
}

struct LossGrad {
  double value = 0.0;
  Eigen::VectorXd grad;
};

/// NLL and its gradient over all predictor parameters (MLP then kernel).
inline LossGrad perf_loss(const PerfPredictor& p, const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  const Mlp::Tape tape = p.feature_extractor.forward_tape(x);
  const GpLoss g = gp_nll(tape.activations.back(), (y.array() - PerfPredictor::kPriorMean).matrix(),
                          p.kernel, true);
  LossGrad out;
  out.value = g.nll;
  const Eigen::Index n = p.feature_extractor.parameter_count();
  out.grad.resize(n + 3);
  out.grad.head(n) = p.feature_extractor.backward(tape, g.grad_latent);
  out.grad.tail(3) = g.grad_hyper;
  return out;
}

// ---------------------------------------------------------------------------
// Cost predictor

class CostPredictor {
 public:
  Mlp mlp;

  CostPredictor() = default;
  explicit CostPredictor(Mlp m) : mlp(std::move(m)) {}

  static CostPredictor fresh(int input_dim, std::uint64_t seed) {
    return CostPredictor(Mlp::standard(input_dim, 1, seed));
  }

  int input_dim() const { return mlp.input_dim(); }

  /// Seconds per epoch, exp of the regressed log cost.
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const {
    if (x.cols() != input_dim()) throw std::invalid_argument("predict_cost: input dimension mismatch");
    return mlp.forward(x).col(0).array().exp();
  }

  Eigen::VectorXd parameters() const { return mlp.parameters(); }
  void set_parameters(const Eigen::VectorXd& p) { mlp.set_parameters(p); }
};

inline double predict_cost(const CostPredictor& c, const PredictorInput& input) {
  return c.predict(input.flatten())(0);
}

/// Mean squared error of the MLP output column 0 against `targets`.
inline LossGrad mse_loss(const Mlp& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& targets) {
  const Mlp::Tape tape = m.forward_tape(x);
  const Eigen::MatrixXd diff = tape.activations.back() - targets;
  const double n = static_cast<double>(diff.size());
  LossGrad out;
  out.value = diff.squaredNorm() / n;
  out.grad = m.backward(tape, 2.0 * diff / n);
  return out;
}

// ---------------------------------------------------------------------------
// Fitting

class FitError : public std::runtime_error {
 public:
  FitError(const std::string& what, int step) : std::runtime_error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

class Adam {
 public:
  Adam(Eigen::Index n, double lr) : lr_(lr), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {}

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    ++t_;
    m_ = kBeta1 * m_ + (1 - kBeta1) * grad;
    v_ = kBeta2 * v_ + (1 - kBeta2) * grad.cwiseAbs2();
    const double c1 = 1 - std::pow(kBeta1, t_);
    const double c2 = 1 - std::pow(kBeta2, t_);
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + kEps);
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  double lr_;
  int t_ = 0;
  Eigen::VectorXd m_, v_;
};

struct FitOptions {
  int steps = 500;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  Eigen::Index batch_size = 256;
  Eigen::Index validation_size = 256;
  int eval_every = 10;
  /// With dataset/curve structure present: every minibatch comes from one
  /// dataset (chosen uniformly) and is filled with whole curves, and the
  /// validation batch takes whole curves from every dataset in equal shares.
  bool curve_batches = true;
  /// Called with (step, validation loss) at every evaluation, step 0 included.
  std::function<void(int, double)> on_eval;
};

template <typename Predictor>
struct FitResult {
  Predictor predictor;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int best_step = 0;
  /// Rows of the training set used as the fixed validation batch.
  std::vector<Eigen::Index> validation_rows;
};

namespace detail {

inline std::vector<Eigen::Index> draw_rows(Eigen::Index n, Eigen::Index k, std::mt19937_64& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  k = std::min(k, n);
  for (Eigen::Index i = 0; i < k; ++i) {
    std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

/// Row sampler that keeps learning curves together.
class CurveSampler {
 public:
  explicit CurveSampler(const TrainingSet& t) : n_(t.size()) {
    if (t.group.empty() || t.curve.empty()) return;
    std::map<int, std::map<int, std::vector<Eigen::Index>>> tree;
    for (Eigen::Index r = 0; r < n_; ++r) {
      tree[t.group[static_cast<std::size_t>(r)]][t.curve[static_cast<std::size_t>(r)]].push_back(r);
    }
    for (auto& [_, curves] : tree) {
      std::vector<std::vector<Eigen::Index>> g;
      for (auto& [__, rows] : curves) g.push_back(std::move(rows));
      groups_.push_back(std::move(g));
    }
  }

  bool structured() const { return !groups_.empty(); }
  std::size_t group_count() const { return groups_.size(); }

  /// Whole curves of group `g` in random order until `k` rows (the last one
  /// possibly cut to its leading epochs).
  std::vector<Eigen::Index> curves_of(std::size_t g, Eigen::Index k, std::mt19937_64& rng) const {
    const auto& curves = groups_[g];
    std::vector<Eigen::Index> out;
    for (auto c : draw_rows(static_cast<Eigen::Index>(curves.size()), static_cast<Eigen::Index>(curves.size()), rng)) {
      for (auto r : curves[static_cast<std::size_t>(c)]) {
        if (static_cast<Eigen::Index>(out.size()) >= k) return out;
        out.push_back(r);
      }
    }
    return out;
  }

  std::vector<Eigen::Index> batch(Eigen::Index k, std::mt19937_64& rng) const {
    if (!structured()) return draw_rows(n_, k, rng);
    const std::size_t g = std::uniform_int_distribution<std::size_t>(0, groups_.size() - 1)(rng);
    return curves_of(g, k, rng);
  }

  /// `k` rows split as evenly as possible over the groups.
  std::vector<Eigen::Index> validation(Eigen::Index k, std::mt19937_64& rng) const {
    if (!structured()) return draw_rows(n_, k, rng);
    const auto n_groups = static_cast<Eigen::Index>(groups_.size());
    std::vector<Eigen::Index> out;
    for (Eigen::Index g = 0; g < n_groups; ++g) {
      const Eigen::Index quota = k / n_groups + (g < k % n_groups ? 1 : 0);
      if (quota == 0) continue;
      const auto rows = curves_of(static_cast<std::size_t>(g), quota, rng);
      out.insert(out.end(), rows.begin(), rows.end());
    }
    return out;
  }

 private:
  Eigen::Index n_;
  std::vector<std::vector<std::vector<Eigen::Index>>> groups_;
};

/// Adam with best-on-validation retention, so the returned state never has
/// a higher validation loss than the initial one.
template <typename Predictor, typename Loss, typename ValLoss>
FitResult<Predictor> fit_generic(const TrainingSet& train, const Predictor& init, const FitOptions& opt,
                                 Loss&& loss, ValLoss&& val_loss) {
  if (train.size() == 0) throw std::invalid_argument("fit: empty training set");
  if (opt.steps < 0) throw std::invalid_argument("fit: negative step count");
  std::mt19937_64 rng(opt.seed);
  TrainingSet flat;
  if (!opt.curve_batches) {
    flat = train;
    flat.group.clear();
    flat.curve.clear();
  }
  const CurveSampler sampler(opt.curve_batches ? train : flat);
  FitResult<Predictor> res{init, 0, 0, 0, sampler.validation(opt.validation_size, rng)};
  // Held-in: the validation rows stay eligible for minibatches.
  const TrainingSet val = train.subset(res.validation_rows);

  Predictor current = init;
  Eigen::VectorXd params = current.parameters();
  Eigen::VectorXd best = params;
  double best_loss = val_loss(current, val);
  if (!std::isfinite(best_loss)) throw FitError("non-finite validation loss at step 0", 0);
  res.initial_loss = best_loss;
  if (opt.on_eval) opt.on_eval(0, best_loss);

  Adam adam(params.size(), opt.lr);
  for (int step = 1; step <= opt.steps; ++step) {
    const TrainingSet batch = train.subset(sampler.batch(opt.batch_size, rng));
    const LossGrad lg = loss(current, batch);
    if (!std::isfinite(lg.value) || !lg.grad.allFinite()) {
      throw FitError("non-finite loss at step " + std::to_string(step), step);
    }
    adam.step(params, lg.grad);
    current.set_parameters(params);
    if (step % std::max(1, opt.eval_every) == 0 || step == opt.steps) {
      double v;
      try {
        v = val_loss(current, val);
      } catch (const std::runtime_error&) {
        v = std::numeric_limits<double>::quiet_NaN();
      }
      if (opt.on_eval) opt.on_eval(step, v);
      if (std::isfinite(v) && v < best_loss) {
        best_loss = v;
        best = params;
        res.best_step = step;
      }
    }
  }
  res.predictor = init;
  res.predictor.set_parameters(best);
  res.final_loss = best_loss;
  return res;
}

}  // namespace detail

/// Joint gradient descent on the GP negative log marginal likelihood over
/// feature-extractor weights and kernel log-hyperparameters, on mini-batches
/// of min(batch_size, N) rows resampled every step (N counts the rows of the
/// batch's dataset under curve_batches). The returned predictor is conditioned
/// on the validation batch.
inline FitResult<PerfPredictor> fit_perf(const TrainingSet& train, const PerfPredictor& init,
                                         const FitOptions& opt) {
  if (init.input_dim() != train.inputs.cols()) throw std::invalid_argument("fit_perf: input dimension mismatch");
  PerfPredictor start = init;
  start.reset_conditioning();
  auto res = detail::fit_generic(
      train, start, opt,
      [](const PerfPredictor& p, const TrainingSet& b) { return perf_loss(p, b.inputs, b.val_iou); },
      [&opt](const PerfPredictor& p, const TrainingSet& v) {
        if (!opt.curve_batches || v.group.empty()) return p.nll(v.inputs, v.val_iou);
        // Sum of per-dataset marginal NLLs, matching the single-dataset batches.
        std::map<int, std::vector<Eigen::Index>> by_group;
        for (Eigen::Index r = 0; r < v.size(); ++r) by_group[v.group[static_cast<std::size_t>(r)]].push_back(r);
        double total = 0.0;
        for (const auto& [_, rows] : by_group) {
          const TrainingSet part = v.subset(rows);
          total += p.nll(part.inputs, part.val_iou);
        }
        return total;
      });
  const TrainingSet val = train.subset(res.validation_rows);
  res.predictor.condition(val.inputs, val.val_iou);
  return res;
}

/// Mean squared error on log epoch cost.
inline FitResult<CostPredictor> fit_cost(const TrainingSet& train, const CostPredictor& init,
                                         const FitOptions& opt) {
  if (init.input_dim() != train.inputs.cols()) throw std::invalid_argument("fit_cost: input dimension mismatch");
  return detail::fit_generic(
      train, init, opt,
      [](const CostPredictor& c, const TrainingSet& b) { return mse_loss(c.mlp, b.inputs, b.log_cost); },
      [](const CostPredictor& c, const TrainingSet& v) { return mse_loss(c.mlp, v.inputs, v.log_cost).value; });
}

// ---------------------------------------------------------------------------
// Gradient checks

struct GradCheckReport {
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  Eigen::Index parameters_checked = 0;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps parameters whose true
/// gradient is ~0 from turning finite-difference round-off into a large ratio.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

template <typename F>
GradCheckReport compare_gradients(Eigen::VectorXd params, const Eigen::VectorXd& analytic, Eigen::Index begin,
                                  Eigen::Index end, double h, F&& value_at) {
  GradCheckReport rep;
  for (Eigen::Index i = begin; i < end; ++i) {
    const double orig = params(i);
    params(i) = orig + h;
    const double fp = value_at(params);
    params(i) = orig - h;
    const double fm = value_at(params);
    params(i) = orig;
    const double err = relative_error(analytic(i), (fp - fm) / (2 * h));
    if (err > rep.max_rel_error || rep.worst_index < 0) {
      rep.max_rel_error = err;
      rep.worst_index = i;
    }
    ++rep.parameters_checked;
  }
  return rep;
}

}  // namespace detail

/// MLP weights on an MSE loss.
inline GradCheckReport grad_check_mlp_mse(const Mlp& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& targets,
                                          double h = 1e-5) {
  if (x.rows() == 0) throw std::invalid_argument("grad_check: empty batch");
  const LossGrad lg = mse_loss(m, x, targets);
  Mlp probe = m;
  return detail::compare_gradients(m.parameters(), lg.grad, 0, lg.grad.size(), h,
                                   [&](const Eigen::VectorXd& p) {
                                     probe.set_parameters(p);
                                     return mse_loss(probe, x, targets).value;
                                   });
}

struct PerfGradCheck {
  GradCheckReport feature_extractor;
  GradCheckReport kernel;
};

/// Feature-extractor weights and kernel log-hyperparameters on the GP NLL.
/// Differences are taken in double, so parameters whose true gradient is
/// near zero (output biases, tiny weights) can show round-off of order
/// 1e-16 * |NLL| / h.
inline PerfGradCheck grad_check_perf(const PerfPredictor& p, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                     double h = 1e-5) {
  if (x.rows() == 0) throw std::invalid_argument("grad_check: empty batch");
  const LossGrad lg = perf_loss(p, x, y);
  PerfPredictor probe = p;
  auto value_at = [&](const Eigen::VectorXd& params) {
    probe.set_parameters(params);
    return probe.nll(x, y);
  };
  const Eigen::Index n = p.feature_extractor.parameter_count();
  PerfGradCheck out;
  out.feature_extractor = detail::compare_gradients(p.parameters(), lg.grad, 0, n, h, value_at);
  out.kernel = detail::compare_gradients(p.parameters(), lg.grad, n, n + 3, h, value_at);
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const KernelParams& k) {
  return {{"log_lengthscale", k.log_lengthscale},
          {"log_signal_var", k.log_signal_var},
          {"log_noise_var", k.log_noise_var}};
}

inline KernelParams kernel_params_from_json(const nlohmann::json& j) {
  return {j.at("log_lengthscale").get<double>(), j.at("log_signal_var").get<double>(),
          j.at("log_noise_var").get<double>()};
}

}  // namespace qttseg

#endif  // QTTSEG_PREDICTORS_HPP
