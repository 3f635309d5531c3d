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

#ifndef FLBA_PRETRAIN_HPP_
#define FLBA_PRETRAIN_HPP_

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "flba/dataset.hpp"
#include "flba/embedding.hpp"
#include "flba/head.hpp"

namespace flba {

struct PretrainConfig {
  nn::Architecture architecture;
  int epochs = 15;
  int batch_size = 32;
  double learning_rate = 2e-3;
  double head_scale = 10.0;
  // Last fraction of each auxiliary class, held out for the linear probe.
  double holdout_fraction = 0.2;
  int probe_iterations = 300;
  // When positive, a probe accuracy below chance + margin is a training error.
  double probe_margin = 0.0;
  std::uint64_t seed = 0;
};

template <typename S>
struct PretrainResult {
  EmbeddingModel<S> model;
  std::vector<double> epoch_loss;
  double probe_accuracy = 0.0;
  double chance = 0.0;
};

// Raised when the training loss stops being finite; carries the parameters
// of the last epoch that finished with a finite loss.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& message, std::vector<double> last_finite)
      : Error(ErrorKind::kTraining, message), last_finite_(std::move(last_finite)) {}
  const std::vector<double>& last_finite_parameters() const { return last_finite_; }

 private:
  std::vector<double> last_finite_;
};

namespace detail {

struct ProbeSplit {
  std::vector<std::size_t> train, holdout;
  std::vector<int> targets;  // per example of the split set
};

inline ProbeSplit split_for_probe(const SplitSet& aux, double holdout_fraction) {
  ProbeSplit s;
  std::map<std::string, int> class_index;
  for (std::size_t i = 0; i < aux.class_set.size(); ++i) {
    class_index[aux.class_set[i]] = static_cast<int>(i);
  }
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < aux.examples.size(); ++i) {
    s.targets.push_back(class_index.at(aux.examples[i].label));
    members[aux.examples[i].label].push_back(i);
  }
  for (const auto& [label, idx] : members) {
    const std::size_t hold = std::min(
        idx.size() - 1, static_cast<std::size_t>(std::floor(idx.size() * holdout_fraction)));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      (k + hold < idx.size() ? s.train : s.holdout).push_back(idx[k]);
    }
  }
  return s;
}

}  // namespace detail

// Linear-probe accuracy: a cosine head fitted on the frozen features of
// the training slice, scored on the held-out slice.
template <typename S>
double probe_accuracy(const EmbeddingModel<S>& model, const SplitSet& aux,
                      const PretrainConfig& cfg) {
  const detail::ProbeSplit split = detail::split_for_probe(aux, cfg.holdout_fraction);
  if (split.holdout.empty()) return 0.0;
  auto gather = [&](const std::vector<std::size_t>& idx, std::vector<int>& targets) {
    std::vector<ImageTensor> imgs;
    for (std::size_t i : idx) {
      imgs.push_back(aux.examples[i].image);
      targets.push_back(split.targets[i]);
    }
    return embed_batch(model, std::span<const ImageTensor>(imgs));
  };
  std::vector<int> train_t, hold_t;
  const Eigen::MatrixXd train_f = gather(split.train, train_t);
  const Eigen::MatrixXd hold_f = gather(split.holdout, hold_t);
  HeadTrainConfig hc;
  hc.iterations = cfg.probe_iterations;
  hc.batch_size = 16;
  hc.learning_rate = 0.05;
  hc.scale = cfg.head_scale;
  hc.seed = derive_seed(cfg.seed, "probe");
  const CosineHead head =
      fit_cosine_head(train_f, train_t, static_cast<int>(aux.class_set.size()), hc);
  return head_accuracy(head, hold_f, hold_t);
}

// Trains the embedding jointly with a cosine-similarity classifier head on
// the auxiliary classes (Adam, softmax cross-entropy) and returns it frozen.
template <typename S>
PretrainResult<S> pretrain_embedding(const SplitSet& aux, const PretrainConfig& cfg) {
  if (aux.examples.empty()) fail(ErrorKind::kConfig, "auxiliary set is empty");
  if (aux.class_set.size() < 2) fail(ErrorKind::kConfig, "auxiliary set needs at least 2 classes");
  if (cfg.epochs < 0 || cfg.batch_size <= 0) fail(ErrorKind::kConfig, "invalid training schedule");

  PretrainResult<S> result;
  EmbeddingModel<S> model = EmbeddingModel<S>::create(cfg.architecture, cfg.seed);
  const detail::ProbeSplit split = detail::split_for_probe(aux, cfg.holdout_fraction);
  const int classes = static_cast<int>(aux.class_set.size());
  Rng rng(derive_seed(cfg.seed, "pretrain"));
  CosineHead head = CosineHead::random(model.feature_dim(), classes, cfg.head_scale, rng);

  Adam body_opt(cfg.learning_rate);
  Adam head_opt(cfg.learning_rate * 5);
  std::vector<std::size_t> order = split.train;
  std::vector<double> grad_d(model.parameters().size());
  nn::Vector<S> grad = nn::Vector<S>::Zero(static_cast<Eigen::Index>(grad_d.size()));
  std::vector<double> last_finite(model.parameters().begin(), model.parameters().end());
  const auto& net = model.network();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(std::span<std::size_t>(order), rng);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::vector<ImageTensor> imgs;
      std::vector<int> targets;
      for (std::size_t k = 0; k < n; ++k) {
        imgs.push_back(aux.examples[order[start + k]].image);
        targets.push_back(split.targets[order[start + k]]);
      }
      auto batch = net.pack(std::span<const ImageTensor>(imgs));
      typename nn::Network<S>::Tape tape;
      const Eigen::MatrixXd feats =
          net.forward(model.parameters(), batch, &tape).template cast<double>();
      const CrossEntropy ce = softmax_cross_entropy(head.logits(feats), targets);
      if (!std::isfinite(ce.loss)) {
        throw TrainingError("pre-training loss became non-finite in epoch " +
                                std::to_string(epoch),
                            last_finite);
      }
      Eigen::MatrixXd gw, gf;
      head.backward(feats, ce.grad_logits, &gw, &gf);
      grad.setZero();
      net.backward(model.parameters(), tape, gf.cast<S>(),
                   std::span<S>(grad.data(), static_cast<std::size_t>(grad.size())));
      for (std::size_t i = 0; i < grad_d.size(); ++i) grad_d[i] = static_cast<double>(grad[i]);
      body_opt.step(model.mutable_parameters().data(), grad_d.data(), grad_d.size());
      head_opt.step(head.weights.data(), gw.data(), static_cast<std::size_t>(gw.size()));
      total += ce.loss * static_cast<double>(n);
      seen += n;
    }
    const double epoch_loss = seen > 0 ? total / static_cast<double>(seen) : 0.0;
    if (!std::isfinite(epoch_loss)) {
      throw TrainingError("pre-training loss became non-finite in epoch " + std::to_string(epoch),
                          last_finite);
    }
    result.epoch_loss.push_back(epoch_loss);
    last_finite.assign(model.parameters().begin(), model.parameters().end());
  }

  model.freeze();
  result.chance = 1.0 / classes;
  result.probe_accuracy = probe_accuracy(model, aux, cfg);
  if (cfg.probe_margin > 0 && result.probe_accuracy < result.chance + cfg.probe_margin) {
    throw TrainingError("probe accuracy " + std::to_string(result.probe_accuracy) +
                            " below chance + margin",
                        last_finite);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace flba

#endif  // FLBA_PRETRAIN_HPP_
