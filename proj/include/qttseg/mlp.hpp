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

#ifndef QTTSEG_MLP_HPP
#define QTTSEG_MLP_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace qttseg {

/// Fully connected network with tanh hidden layers and a linear output.
/// Samples are rows: forward() maps an (n x in) matrix to (n x out).
class Mlp {
 public:
  struct Layer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;    // out
  };

  /// Activations kept by forward_tape() for backward(). Entry 0 is the input.
  struct Tape {
    std::vector<Eigen::MatrixXd> activations;
  };

  Mlp() = default;

  /// Glorot-uniform weights, zero biases.
  Mlp(const std::vector<int>& sizes, std::uint64_t seed) {
    if (sizes.size() < 2) throw std::invalid_argument("Mlp needs at least two layer sizes");
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
      const int in = sizes[i], out = sizes[i + 1];
      const double limit = std::sqrt(6.0 / (in + out));
      std::uniform_real_distribution<double> u(-limit, limit);
      Layer l{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
      for (int c = 0; c < in; ++c)
        for (int r = 0; r < out; ++r) l.weight(r, c) = u(rng);
      layers_.push_back(std::move(l));
    }
  }

  /// The [in -> 64 -> 32 -> out] architecture used by both predictors.
  static Mlp standard(int in, int out, std::uint64_t seed) { return Mlp({in, 64, 32, out}, seed); }

  int input_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols()); }
  int output_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows()); }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const { return forward_tape(x).activations.back(); }

  Tape forward_tape(const Eigen::MatrixXd& x) const {
    if (x.cols() != input_dim()) throw std::invalid_argument("Mlp: input dimension mismatch");
    Tape t;
    t.activations.reserve(layers_.size() + 1);
    t.activations.push_back(x);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Eigen::MatrixXd z = t.activations.back() * layers_[i].weight.transpose();
      z.rowwise() += layers_[i].bias.transpose();
      if (i + 1 < layers_.size()) z = z.array().tanh().matrix();
      t.activations.push_back(std::move(z));
    }
    return t;
  }

  /// Gradient of a loss w.r.t. all parameters (flat, same order as
  /// parameters()), given dLoss/dOutput of shape (n x out).
  Eigen::VectorXd backward(const Tape& t, const Eigen::MatrixXd& grad_out,
                           Eigen::MatrixXd* grad_input = nullptr) const {
    Eigen::VectorXd g(parameter_count());
    Eigen::MatrixXd delta = grad_out;
    Eigen::Index end = g.size();
    for (std::size_t k = layers_.size(); k-- > 0;) {
      const auto& layer = layers_[k];
      const Eigen::MatrixXd& in = t.activations[k];
      const Eigen::Index nb = layer.bias.size();
      const Eigen::Index nw = layer.weight.size();
      g.segment(end - nb, nb) = delta.colwise().sum().transpose();
      Eigen::MatrixXd gw = delta.transpose() * in;
      g.segment(end - nb - nw, nw) = Eigen::Map<const Eigen::VectorXd>(gw.data(), nw);
      end -= nb + nw;
      Eigen::MatrixXd prev = delta * layer.weight;
      if (k > 0) {
        prev.array() *= 1.0 - in.array().square();
      } else if (grad_input != nullptr) {
        *grad_input = prev;
      }
      delta = std::move(prev);
    }
    return g;
  }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  Eigen::VectorXd parameters() const {
    Eigen::VectorXd p(parameter_count());
    Eigen::Index at = 0;
    for (const auto& l : layers_) {
      p.segment(at, l.weight.size()) = Eigen::Map<const Eigen::VectorXd>(l.weight.data(), l.weight.size());
      at += l.weight.size();
      p.segment(at, l.bias.size()) = l.bias;
      at += l.bias.size();
    }
    return p;
  }

  void set_parameters(const Eigen::VectorXd& p) {
    if (p.size() != parameter_count()) throw std::invalid_argument("Mlp: parameter count mismatch");
    Eigen::Index at = 0;
    for (auto& l : layers_) {
      Eigen::Map<Eigen::VectorXd>(l.weight.data(), l.weight.size()) = p.segment(at, l.weight.size());
      at += l.weight.size();
      l.bias = p.segment(at, l.bias.size());
      at += l.bias.size();
    }
  }

  bool all_finite() const { return parameters().allFinite(); }

  bool operator==(const Mlp& o) const {
    if (layers_.size() != o.layers_.size()) return false;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].weight != o.layers_[i].weight || layers_[i].bias != o.layers_[i].bias) return false;
    }
    return true;
  }

 private:
  std::vector<Layer> layers_;
};

inline nlohmann::json to_json(const Mlp& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers()) {
    nlohmann::json w = nlohmann::json::array();
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      std::vector<double> row(l.weight.cols());
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) row[c] = l.weight(r, c);
      w.push_back(std::move(row));
    }
    layers.push_back({{"weight", std::move(w)},
                      {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
  }
  return {{"layers", std::move(layers)}};
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  const auto& layers = j.at("layers");
  std::vector<int> sizes;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& w = layers[i].at("weight");
    if (i == 0) sizes.push_back(static_cast<int>(w.at(0).size()));
    sizes.push_back(static_cast<int>(w.size()));
  }
  Mlp m(sizes, 0);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = m.layers()[i];
    const auto& w = layers[i].at("weight");
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      const auto row = w.at(r).get<std::vector<double>>();
      // Column count fixed by the previous layer, so this also checks chaining.
      if (static_cast<Eigen::Index>(row.size()) != l.weight.cols()) {
        throw std::invalid_argument("Mlp: layer shapes do not chain");
      }
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = row[c];
    }
    const auto b = layers[i].at("bias").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(b.size()) != l.bias.size()) throw std::invalid_argument("Mlp: bias size");
    l.bias = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
  }
  return m;
}

}  // namespace qttseg

#endif  // QTTSEG_MLP_HPP
