// Copyright 2026 The fewshot-backdoor Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Classification heads on feature matrices (D x N) and the optimizers used
// to train them.

#ifndef FLBA_HEAD_HPP_
#define FLBA_HEAD_HPP_

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "flba/common.hpp"

namespace flba {

// Column-wise v / (|v| + eps).
inline Eigen::MatrixXd normalize_columns(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out = m;
  for (Eigen::Index j = 0; j < m.cols(); ++j) out.col(j) /= (m.col(j).norm() + kNormEpsilon);
  return out;
}

// Back-propagates through normalize_columns.
inline Eigen::MatrixXd normalize_columns_backward(const Eigen::MatrixXd& m,
                                                  const Eigen::MatrixXd& grad_out) {
  Eigen::MatrixXd g(m.rows(), m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double n = m.col(j).norm();
    const double p = n + kNormEpsilon;
    if (n == 0.0) {
      g.col(j) = grad_out.col(j) / p;
    } else {
      g.col(j) = grad_out.col(j) / p - m.col(j) * (m.col(j).dot(grad_out.col(j)) / (n * p * p));
    }
  }
  return g;
}

// logits = scale * normalize(W)^T normalize(F); W is D x C.
struct CosineHead {
  Eigen::MatrixXd weights;
  double scale = 10.0;

  static CosineHead random(int dim, int classes, double scale, Rng& rng) {
    CosineHead h;
    h.scale = scale;
    h.weights.resize(dim, classes);
    for (Eigen::Index i = 0; i < h.weights.size(); ++i) h.weights.data()[i] = normal(rng, 0, 1);
    return h;
  }

  Eigen::MatrixXd logits(const Eigen::MatrixXd& features) const {
    return scale * normalize_columns(weights).transpose() * normalize_columns(features);
  }

  // Gradients of a loss given dL/dlogits (C x N).
  void backward(const Eigen::MatrixXd& features, const Eigen::MatrixXd& grad_logits,
                Eigen::MatrixXd* grad_weights, Eigen::MatrixXd* grad_features) const {
    const Eigen::MatrixXd wn = normalize_columns(weights);
    const Eigen::MatrixXd fn = normalize_columns(features);
    if (grad_weights != nullptr) {
      *grad_weights = normalize_columns_backward(weights, scale * fn * grad_logits.transpose());
    }
    if (grad_features != nullptr) {
      *grad_features = normalize_columns_backward(features, scale * wn * grad_logits);
    }
  }
};

// logits = W^T F + b; W is D x C.
struct LinearHead {
  Eigen::MatrixXd weights;
  Eigen::VectorXd bias;

  static LinearHead random(int dim, int classes, Rng& rng) {
    LinearHead h;
    h.weights.resize(dim, classes);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
    for (Eigen::Index i = 0; i < h.weights.size(); ++i) {
      h.weights.data()[i] = normal(rng, 0, stddev);
    }
    h.bias = Eigen::VectorXd::Zero(classes);
    return h;
  }

  Eigen::MatrixXd logits(const Eigen::MatrixXd& features) const {
    Eigen::MatrixXd z = weights.transpose() * features;
    z.colwise() += bias;
    return z;
  }
};

struct CrossEntropy {
  double loss = 0.0;
  Eigen::MatrixXd grad_logits;  // d mean-loss / d logits
};

// Mean softmax cross-entropy over the columns of logits.
inline CrossEntropy softmax_cross_entropy(const Eigen::MatrixXd& logits,
                                          const std::vector<int>& targets) {
  CrossEntropy ce;
  const Eigen::Index n = logits.cols();
  ce.grad_logits.resize(logits.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double mx = logits.col(j).maxCoeff();
    Eigen::VectorXd e = (logits.col(j).array() - mx).exp();
    const double z = e.sum();
    ce.loss += -(logits(targets[j], j) - mx - std::log(z));
    ce.grad_logits.col(j) = e / z;
    ce.grad_logits(targets[j], j) -= 1.0;
  }
  if (n > 0) {
    ce.loss /= static_cast<double>(n);
    ce.grad_logits /= static_cast<double>(n);
  }
  return ce;
}

// Index of the largest entry; ties go to the lowest index.
inline int argmax_lowest(const Eigen::VectorXd& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = static_cast<int>(i);
  }
  return best;
}

// Adam over a flat parameter array.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  template <typename T>
  void step(T* params, const double* grad, std::size_t n) {
    if (m_.size() != n) {
      m_.assign(n, 0.0);
      v_.assign(n, 0.0);
      t_ = 0;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < n; ++i) {
      m_[i] = b1_ * m_[i] + (1 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1 - b2_) * grad[i] * grad[i];
      const double update = lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
      params[i] = static_cast<T>(static_cast<double>(params[i]) - update);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::vector<double> m_, v_;
  int t_ = 0;
};

// SGD with momentum and L2 weight decay.
class MomentumSgd {
 public:
  MomentumSgd(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), decay_(weight_decay) {}

  template <typename T>
  void step(T* params, const double* grad, std::size_t n) {
    if (velocity_.size() != n) velocity_.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grad[i] + decay_ * static_cast<double>(params[i]);
      velocity_[i] = momentum_ * velocity_[i] + g;
      params[i] = static_cast<T>(static_cast<double>(params[i]) - lr_ * velocity_[i]);
    }
  }

 private:
  double lr_, momentum_, decay_;
  std::vector<double> velocity_;
};

struct HeadTrainConfig {
  int iterations = 100;
  int batch_size = 4;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.001;
  double scale = 10.0;
  std::uint64_t seed = 0;
};

// Continues training `head` with mini-batch SGD on softmax cross-entropy
// over fixed features. Batches cycle through a seeded permutation.
inline void train_cosine_head(CosineHead& head, const Eigen::MatrixXd& features,
                              const std::vector<int>& targets, const HeadTrainConfig& cfg,
                              std::uint64_t stream = 0) {
  const std::size_t n = targets.size();
  if (n == 0 || cfg.iterations <= 0) return;
  Rng rng(derive_seed(cfg.seed, "cosine-head-batches", stream));
  MomentumSgd opt(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  shuffle(std::span<std::size_t>(order), rng);
  const std::size_t bs =
      std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, cfg.batch_size)));
  std::size_t cursor = 0;
  Eigen::MatrixXd batch(features.rows(), static_cast<Eigen::Index>(bs));
  std::vector<int> batch_targets(bs);
  for (int it = 0; it < cfg.iterations; ++it) {
    for (std::size_t b = 0; b < bs; ++b) {
      if (cursor == n) {
        shuffle(std::span<std::size_t>(order), rng);
        cursor = 0;
      }
      batch.col(static_cast<Eigen::Index>(b)) =
          features.col(static_cast<Eigen::Index>(order[cursor]));
      batch_targets[b] = targets[order[cursor]];
      ++cursor;
    }
    const CrossEntropy ce = softmax_cross_entropy(head.logits(batch), batch_targets);
    if (!std::isfinite(ce.loss)) fail(ErrorKind::kTraining, "cosine head loss diverged");
    Eigen::MatrixXd gw;
    head.backward(batch, ce.grad_logits, &gw, nullptr);
    opt.step(head.weights.data(), gw.data(), static_cast<std::size_t>(gw.size()));
  }
}

inline CosineHead fit_cosine_head(const Eigen::MatrixXd& features, const std::vector<int>& targets,
                                  int classes, const HeadTrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "cosine-head-init"));
  CosineHead head = CosineHead::random(static_cast<int>(features.rows()), classes, cfg.scale, rng);
  train_cosine_head(head, features, targets, cfg);
  return head;
}

inline double head_accuracy(const CosineHead& head, const Eigen::MatrixXd& features,
                            const std::vector<int>& targets) {
  if (targets.empty()) return 0.0;
  const Eigen::MatrixXd z = head.logits(features);
  int correct = 0;
  for (Eigen::Index j = 0; j < z.cols(); ++j) correct += argmax_lowest(z.col(j)) == targets[j];
  return static_cast<double>(correct) / static_cast<double>(targets.size());
}

}  // namespace flba

#endif  // FLBA_HEAD_HPP_
