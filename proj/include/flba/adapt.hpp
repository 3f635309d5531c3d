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

// Few-shot adaptation paradigms and per-episode ASR/BA evaluation.

#ifndef FLBA_ADAPT_HPP_
#define FLBA_ADAPT_HPP_

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "flba/dataset.hpp"
#include "flba/embedding.hpp"
#include "flba/head.hpp"
#include "flba/poison.hpp"

namespace flba {

enum class Paradigm { kCosineHead, kPrototype, kInnerLoop };

inline const char* to_string(Paradigm p) {
  switch (p) {
    case Paradigm::kCosineHead: return "cosine-head";
    case Paradigm::kPrototype: return "prototype";
    case Paradigm::kInnerLoop: return "inner-loop";
  }
  return "?";
}

inline Paradigm parse_paradigm(const std::string& s) {
  if (s == "cosine-head") return Paradigm::kCosineHead;
  if (s == "prototype") return Paradigm::kPrototype;
  if (s == "inner-loop") return Paradigm::kInnerLoop;
  fail(ErrorKind::kConfig, "unknown paradigm '" + s + "'");
}

struct InnerLoopConfig {
  int steps = 10;
  double inner_lr = 0.01;
  std::uint64_t seed = 0;
};

// Index of the smallest entry; ties go to the lowest index.
inline int argmin_lowest(const Eigen::VectorXd& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] < v[best]) best = static_cast<int>(i);
  }
  return best;
}

// Distances closer than this are a tie. Parallel prototypes of different
// length give equal cosines that differ in the last bits after rounding.
inline constexpr double kPrototypeTieTolerance = 1e-9;

// Nearest prototype by cosine distance; ties go to the lowest class index.
inline int nearest_prototype(const Eigen::MatrixXd& prototypes, const FeatureVector& f) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < prototypes.cols(); ++c) {
    const double d = cosine_distance(f, prototypes.col(c));
    if (d < best_d - kPrototypeTieTolerance) {
      best = static_cast<int>(c);
      best_d = d;
    }
  }
  return best;
}

template <typename S>
class AdaptedClassifier {
 public:
  Paradigm paradigm() const { return paradigm_; }
  const std::vector<std::string>& class_order() const { return class_order_; }
  int num_classes() const { return static_cast<int>(class_order_.size()); }

  // Model producing features: the shared embedding, or the adapted copy.
  const EmbeddingModel<S>& embedding() const {
    return paradigm_ == Paradigm::kInnerLoop ? adapted_ : *shared_;
  }

  const CosineHead& cosine_head() const { return cosine_; }
  CosineHead& mutable_cosine_head() { return cosine_; }
  const Eigen::MatrixXd& prototypes() const { return prototypes_; }
  const LinearHead& linear_head() const { return linear_; }

  // Class scores (C x N) from features; larger is more likely.
  Eigen::MatrixXd scores_from_features(const Eigen::MatrixXd& f) const {
    switch (paradigm_) {
      case Paradigm::kCosineHead: return cosine_.logits(f);
      case Paradigm::kPrototype: {
        Eigen::MatrixXd s(prototypes_.cols(), f.cols());
        for (Eigen::Index j = 0; j < f.cols(); ++j)
          for (Eigen::Index c = 0; c < prototypes_.cols(); ++c)
            s(c, j) = -cosine_distance(f.col(j), prototypes_.col(c));
        return s;
      }
      case Paradigm::kInnerLoop: return linear_.logits(f);
    }
    return {};
  }

  // d loss / d features for a single column, given d loss / d scores.
  FeatureVector scores_backward(const FeatureVector& f, const Eigen::VectorXd& grad_scores) const {
    switch (paradigm_) {
      case Paradigm::kCosineHead: {
        Eigen::MatrixXd gf;
        cosine_.backward(f, grad_scores, nullptr, &gf);
        return gf.col(0);
      }
      case Paradigm::kPrototype: {
        FeatureVector g = FeatureVector::Zero(f.size());
        for (Eigen::Index c = 0; c < prototypes_.cols(); ++c)
          g -= grad_scores[c] * cosine_distance_grad(f, prototypes_.col(c));
        return g;
      }
      case Paradigm::kInnerLoop: return linear_.weights * grad_scores;
    }
    return {};
  }

  Eigen::MatrixXd scores(std::span<const ImageTensor> images) const {
    return scores_from_features(embed_batch(embedding(), images));
  }

  // Predicted class_order indices.
  std::vector<int> predict_indices(std::span<const ImageTensor> images) const {
    const Eigen::MatrixXd f = embed_batch(embedding(), images);
    std::vector<int> out(images.size());
    if (paradigm_ == Paradigm::kPrototype) {
      for (Eigen::Index j = 0; j < f.cols(); ++j) out[j] = nearest_prototype(prototypes_, f.col(j));
      return out;
    }
    const Eigen::MatrixXd s = scores_from_features(f);
    for (Eigen::Index j = 0; j < s.cols(); ++j) out[j] = argmax_lowest(s.col(j));
    return out;
  }

  std::string predict(const ImageTensor& image) const {
    return class_order_[predict_indices(std::span<const ImageTensor>(&image, 1)).front()];
  }

  // Construction; see the adapt_* functions.
  static AdaptedClassifier make(Paradigm p, std::shared_ptr<const EmbeddingModel<S>> shared,
                                std::vector<std::string> class_order) {
    AdaptedClassifier c;
    c.paradigm_ = p;
    c.shared_ = std::move(shared);
    c.class_order_ = std::move(class_order);
    return c;
  }
  void set_cosine_head(CosineHead h) { cosine_ = std::move(h); }
  void set_prototypes(Eigen::MatrixXd p) { prototypes_ = std::move(p); }
  void set_inner_state(EmbeddingModel<S> adapted, LinearHead head) {
    adapted_ = std::move(adapted);
    linear_ = std::move(head);
  }
  EmbeddingModel<S>& mutable_adapted() { return adapted_; }
  LinearHead& mutable_linear_head() { return linear_; }
  std::shared_ptr<const EmbeddingModel<S>> shared_embedding() const { return shared_; }

 private:
  Paradigm paradigm_ = Paradigm::kCosineHead;
  std::shared_ptr<const EmbeddingModel<S>> shared_;
  std::vector<std::string> class_order_;
  CosineHead cosine_;
  Eigen::MatrixXd prototypes_;
  EmbeddingModel<S> adapted_;
  LinearHead linear_;
};

namespace detail {

inline std::vector<int> support_targets(const std::vector<LabeledExample>& support,
                                        const std::vector<std::string>& class_order) {
  std::vector<int> t;
  t.reserve(support.size());
  for (const auto& e : support) {
    auto it = std::find(class_order.begin(), class_order.end(), e.label);
    if (it == class_order.end()) {
      fail(ErrorKind::kInput, "support label '" + e.label + "' is not in the class order");
    }
    t.push_back(static_cast<int>(it - class_order.begin()));
  }
  return t;
}

}  // namespace detail

template <typename S>
AdaptedClassifier<S> adapt_cosine_head(std::shared_ptr<const EmbeddingModel<S>> embedding,
                                       const std::vector<LabeledExample>& support,
                                       const std::vector<std::string>& class_order,
                                       const HeadTrainConfig& cfg) {
  if (!embedding->frozen()) fail(ErrorKind::kInput, "cosine-head adaptation needs a frozen embedding");
  const std::vector<int> targets = detail::support_targets(support, class_order);
  const std::vector<ImageTensor> imgs = images_of(support);
  const Eigen::MatrixXd f = embed_batch(*embedding, std::span<const ImageTensor>(imgs));
  auto c = AdaptedClassifier<S>::make(Paradigm::kCosineHead, embedding, class_order);
  c.set_cosine_head(fit_cosine_head(f, targets, static_cast<int>(class_order.size()), cfg));
  return c;
}

template <typename S>
AdaptedClassifier<S> adapt_prototypes(std::shared_ptr<const EmbeddingModel<S>> embedding,
                                      const std::vector<LabeledExample>& support,
                                      const std::vector<std::string>& class_order) {
  const std::vector<int> targets = detail::support_targets(support, class_order);
  const std::vector<ImageTensor> imgs = images_of(support);
  const Eigen::MatrixXd f = embed_batch(*embedding, std::span<const ImageTensor>(imgs));
  Eigen::MatrixXd protos = Eigen::MatrixXd::Zero(f.rows(), static_cast<Eigen::Index>(class_order.size()));
  std::vector<int> counts(class_order.size(), 0);
  for (std::size_t j = 0; j < targets.size(); ++j) {
    protos.col(targets[j]) += f.col(static_cast<Eigen::Index>(j));
    ++counts[targets[j]];
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) fail(ErrorKind::kInput, "class '" + class_order[c] + "' has no support example");
    protos.col(static_cast<Eigen::Index>(c)) /= counts[c];
  }
  auto c = AdaptedClassifier<S>::make(Paradigm::kPrototype, embedding, class_order);
  c.set_prototypes(std::move(protos));
  return c;
}

namespace detail {

// One full-batch SGD step of the inner loop on (theta copy, linear head);
// returns the support loss before the step.
template <typename S>
double inner_loop_step(EmbeddingModel<S>& model, LinearHead& head,
                       std::span<const ImageTensor> images, const std::vector<int>& targets,
                       double lr) {
  const auto& net = model.network();
  auto batch = net.pack(images);
  typename nn::Network<S>::Tape tape;
  const Eigen::MatrixXd f = net.forward(model.parameters(), batch, &tape).template cast<double>();
  const CrossEntropy ce = softmax_cross_entropy(head.logits(f), targets);
  if (!std::isfinite(ce.loss)) fail(ErrorKind::kTraining, "inner-loop loss diverged");
  const Eigen::MatrixXd gw = f * ce.grad_logits.transpose();
  const Eigen::VectorXd gb = ce.grad_logits.rowwise().sum();
  const Eigen::MatrixXd gf = head.weights * ce.grad_logits;
  nn::Vector<S> grad = nn::Vector<S>::Zero(static_cast<Eigen::Index>(model.parameters().size()));
  net.backward(model.parameters(), tape, gf.cast<S>(),
               std::span<S>(grad.data(), static_cast<std::size_t>(grad.size())));
  auto p = model.mutable_parameters();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<S>(p[i] - lr * grad[i]);
  head.weights -= lr * gw;
  head.bias -= lr * gb;
  return ce.loss;
}

template <typename S>
double inner_loop_loss(const EmbeddingModel<S>& model, const LinearHead& head,
                       std::span<const ImageTensor> images, const std::vector<int>& targets) {
  return softmax_cross_entropy(head.logits(embed_batch(model, images)), targets).loss;
}

}  // namespace detail

// Copies theta, attaches a linear head and runs `steps` full-batch gradient
// steps on the support cross-entropy. The shared embedding is untouched.
template <typename S>
AdaptedClassifier<S> adapt_inner_loop(std::shared_ptr<const EmbeddingModel<S>> embedding,
                                      const std::vector<LabeledExample>& support,
                                      const std::vector<std::string>& class_order,
                                      const InnerLoopConfig& cfg) {
  if (cfg.steps < 0 || !(cfg.inner_lr >= 0)) fail(ErrorKind::kConfig, "invalid inner-loop schedule");
  const std::vector<int> targets = detail::support_targets(support, class_order);
  const std::vector<ImageTensor> imgs = images_of(support);
  EmbeddingModel<S> theta = embedding->thawed_copy();
  Rng rng(derive_seed(cfg.seed, "inner-loop-head"));
  LinearHead head = LinearHead::random(theta.feature_dim(), static_cast<int>(class_order.size()), rng);
  for (int s = 0; s < cfg.steps; ++s) {
    detail::inner_loop_step(theta, head, std::span<const ImageTensor>(imgs), targets, cfg.inner_lr);
  }
  auto c = AdaptedClassifier<S>::make(Paradigm::kInnerLoop, embedding, class_order);
  c.set_inner_state(std::move(theta), std::move(head));
  return c;
}

// Evaluation ------------------------------------------------------------------

struct EpisodeResult {
  std::uint64_t seed = 0;
  double asr = 0.0;
  double ba = 0.0;
  int attack_queries = 0;  // untargeted-class queries
  int attack_hits = 0;
  int clean_queries = 0;
  int clean_correct = 0;
};

// BA over all clean queries; ASR over triggered queries whose true class is
// not the target.
template <typename S>
EpisodeResult evaluate(const AdaptedClassifier<S>& clf, const Episode& episode,
                       const AppliedTrigger& trigger) {
  EpisodeResult r;
  r.seed = episode.seed;
  const int target = episode.class_position(episode.target_class);
  std::vector<ImageTensor> clean = images_of(episode.query);
  std::vector<ImageTensor> triggered;
  for (const auto& q : episode.query) {
    if (q.label != episode.target_class) triggered.push_back(trigger.apply(q.image));
  }
  const std::vector<int> pc = clf.predict_indices(std::span<const ImageTensor>(clean));
  for (std::size_t i = 0; i < pc.size(); ++i) {
    r.clean_correct += pc[i] == episode.class_position(episode.query[i].label);
  }
  r.clean_queries = static_cast<int>(pc.size());
  if (!triggered.empty()) {
    const std::vector<int> pt = clf.predict_indices(std::span<const ImageTensor>(triggered));
    for (int p : pt) r.attack_hits += p == target;
  }
  r.attack_queries = static_cast<int>(triggered.size());
  r.ba = r.clean_queries > 0 ? static_cast<double>(r.clean_correct) / r.clean_queries : 0.0;
  r.asr = r.attack_queries > 0 ? static_cast<double>(r.attack_hits) / r.attack_queries : 0.0;
  return r;
}

template <typename S>
EpisodeResult evaluate(const AdaptedClassifier<S>& clf, const Episode& episode,
                       const TriggerSpec& trig) {
  return evaluate(clf, episode, AppliedTrigger::from_patch(trig));
}

}  // namespace flba

#endif  // FLBA_ADAPT_HPP_
