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

// Defense probes: clean fine-tuning, colour-jitter pre-processing and
// Neural Cleanse style trigger reverse engineering.

#ifndef FLBA_DEFENSE_HPP_
#define FLBA_DEFENSE_HPP_

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "flba/adapt.hpp"

namespace flba {

// Clean fine-tuning ---------------------------------------------------------

struct FinetuneConfig {
  int epochs = 10;
  // Cosine head: one epoch is ceil(N / batch_size) SGD iterations.
  HeadTrainConfig head;
  // Inner loop: one full-batch step per epoch.
  double inner_lr = 0.01;
};

struct TracePoint {
  int epoch = 0;
  double asr = 0.0;
  double ba = 0.0;
};

template <typename S>
struct FinetuneResult {
  AdaptedClassifier<S> classifier;
  std::vector<TracePoint> trace;  // trace[0] is before any fine-tuning
};

// Continues training the classifier on clean support data, evaluating on
// the episode's queries after every epoch. The shared embedding is never
// touched: the cosine head only moves its head, the inner loop its own copy.
template <typename S>
FinetuneResult<S> finetune_defense(const AdaptedClassifier<S>& classifier,
                                   const std::vector<LabeledExample>& clean_support,
                                   const Episode& episode, const AppliedTrigger& trigger,
                                   const FinetuneConfig& cfg) {
  if (classifier.paradigm() == Paradigm::kPrototype) {
    fail(ErrorKind::kUnsupported,
         "prototype classifiers are recomputed, not fine-tuned; use recompute_prototypes");
  }
  if (cfg.epochs < 0) fail(ErrorKind::kConfig, "fine-tuning epochs must be non-negative");
  FinetuneResult<S> out{classifier, {}};
  auto record = [&](int epoch) {
    const EpisodeResult r = evaluate(out.classifier, episode, trigger);
    out.trace.push_back({epoch, r.asr, r.ba});
  };
  record(0);
  const std::vector<int> targets = detail::support_targets(clean_support, classifier.class_order());
  const std::vector<ImageTensor> imgs = images_of(clean_support);
  Eigen::MatrixXd features;
  if (classifier.paradigm() == Paradigm::kCosineHead) {
    features = embed_batch(classifier.embedding(), std::span<const ImageTensor>(imgs));
  }
  for (int e = 1; e <= cfg.epochs; ++e) {
    if (classifier.paradigm() == Paradigm::kCosineHead) {
      HeadTrainConfig hc = cfg.head;
      const int bs = std::max(1, hc.batch_size);
      hc.iterations = static_cast<int>((targets.size() + bs - 1) / bs);
      train_cosine_head(out.classifier.mutable_cosine_head(), features, targets, hc,
                        static_cast<std::uint64_t>(e));
    } else {
      detail::inner_loop_step(out.classifier.mutable_adapted(), out.classifier.mutable_linear_head(),
                              std::span<const ImageTensor>(imgs), targets, cfg.inner_lr);
    }
    record(e);
  }
  return out;
}

// The prototype paradigm's counterpart to fine-tuning.
template <typename S>
AdaptedClassifier<S> recompute_prototypes(const AdaptedClassifier<S>& classifier,
                                          const std::vector<LabeledExample>& clean_support) {
  return adapt_prototypes(classifier.shared_embedding(), clean_support, classifier.class_order());
}

// A fresh support set for the episode's classes drawn from images the
// episode does not use ("new support set" mode).
inline std::vector<LabeledExample> new_support_set(const SplitSet& support_pool, const Episode& episode,
                                                   int shots, std::uint64_t seed) {
  std::set<std::string> used;
  for (const auto& e : episode.support) used.insert(e.source_id);
  for (const auto& e : episode.query) used.insert(e.source_id);
  Rng rng(derive_seed(seed, "new-support"));
  std::vector<LabeledExample> out;
  for (const auto& c : episode.class_order) {
    std::vector<const LabeledExample*> members;
    for (const auto* e : support_pool.of_class(c)) {
      if (!used.contains(e->source_id)) members.push_back(e);
    }
    if (static_cast<int>(members.size()) < shots) {
      fail(ErrorKind::kSampling, "class '" + c + "' has only " + std::to_string(members.size()) +
                                     " unused support images, need " + std::to_string(shots));
    }
    shuffle(std::span<const LabeledExample*>(members), rng);
    for (int i = 0; i < shots; ++i) out.push_back(*members[i]);
  }
  return out;
}

// Pre-processing --------------------------------------------------------------
//
// brightness  x * f
// contrast    (x - m) * f + m, m = mean luma (0.299 R + 0.587 G + 0.114 B)
// saturation  S * f in HSV (hexcone), clipped to [0,1]
// hue         H + r turns in HSV, r = u / 2 for u in [-budget, budget]
// with f uniform in [1 - budget, 1 + budget]. Outputs are clipped to [0,1].

enum class PreprocessKind { kBrightness, kContrast, kSaturation, kHue };

inline const char* to_string(PreprocessKind k) {
  switch (k) {
    case PreprocessKind::kBrightness: return "brightness";
    case PreprocessKind::kContrast: return "contrast";
    case PreprocessKind::kSaturation: return "saturation";
    case PreprocessKind::kHue: return "hue";
  }
  return "?";
}

inline PreprocessKind parse_preprocess_kind(const std::string& s) {
  for (auto k : {PreprocessKind::kBrightness, PreprocessKind::kContrast, PreprocessKind::kSaturation,
                 PreprocessKind::kHue}) {
    if (s == to_string(k)) return k;
  }
  fail(ErrorKind::kConfig, "unknown pre-processing transform '" + s + "'");
}

struct PreprocessSpec {
  PreprocessKind kind = PreprocessKind::kBrightness;
  double budget = 0.0;
};

namespace detail {

inline void rgb_to_hsv(const double rgb[3], double& h, double& s, double& v) {
  const double mx = std::max({rgb[0], rgb[1], rgb[2]});
  const double mn = std::min({rgb[0], rgb[1], rgb[2]});
  const double d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0;
  if (d == 0) {
    h = 0;
    return;
  }
  if (mx == rgb[0]) {
    h = (rgb[1] - rgb[2]) / d;
  } else if (mx == rgb[1]) {
    h = 2.0 + (rgb[2] - rgb[0]) / d;
  } else {
    h = 4.0 + (rgb[0] - rgb[1]) / d;
  }
  h /= 6.0;
  h -= std::floor(h);
}

}  // namespace detail

// Applies the transform with an explicit factor (brightness, contrast,
// saturation) or hue rotation in turns.
inline ImageTensor apply_preprocess_factor(const ImageTensor& image, PreprocessKind kind,
                                           double factor) {
  const bool identity = kind == PreprocessKind::kHue ? factor == 0.0 : factor == 1.0;
  if (identity) return image;
  ImageTensor out = image;
  auto px = out.mutable_pixels();
  const int c = image.channels();
  const std::size_t n = px.size() / c;
  switch (kind) {
    case PreprocessKind::kBrightness:
      for (double& v : px) v *= factor;
      break;
    case PreprocessKind::kContrast: {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        mean += c >= 3 ? 0.299 * px[i * c] + 0.587 * px[i * c + 1] + 0.114 * px[i * c + 2] : px[i * c];
      }
      mean /= static_cast<double>(n);
      for (double& v : px) v = (v - mean) * factor + mean;
      break;
    }
    case PreprocessKind::kSaturation:
    case PreprocessKind::kHue: {
      if (c < 3) break;  // no chroma
      for (std::size_t i = 0; i < n; ++i) {
        double* p = &px[i * c];
        double h, s, v;
        detail::rgb_to_hsv(p, h, s, v);
        if (s == 0.0) continue;
        if (kind == PreprocessKind::kSaturation) {
          s = std::clamp(s * factor, 0.0, 1.0);
        } else {
          h += factor;
        }
        detail::hsv_to_rgb(h, s, v, p);
      }
      break;
    }
  }
  for (double& v : px) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// Draws the jitter factor for (spec, seed).
inline double preprocess_factor(const PreprocessSpec& spec, std::uint64_t seed) {
  if (!(spec.budget >= 0.0 && spec.budget <= 0.5)) {
    fail(ErrorKind::kConfig, "pre-processing budget must lie in [0, 0.5]");
  }
  if (spec.budget == 0.0) return spec.kind == PreprocessKind::kHue ? 0.0 : 1.0;
  Rng rng(derive_seed(seed, "preprocess"));
  const double u = uniform(rng, -spec.budget, spec.budget);
  return spec.kind == PreprocessKind::kHue ? u / 2.0 : 1.0 + u;
}

inline ImageTensor apply_preprocess(const ImageTensor& image, const PreprocessSpec& spec,
                                    std::uint64_t seed) {
  return apply_preprocess_factor(image, spec.kind, preprocess_factor(spec, seed));
}

// Evaluates an episode with every query (clean and triggered) pre-processed;
// query i uses seed derive_seed(seed, "query", i).
template <typename S>
EpisodeResult evaluate_preprocessed(const AdaptedClassifier<S>& clf, const Episode& episode,
                                    const AppliedTrigger& trigger, const PreprocessSpec& spec,
                                    std::uint64_t seed) {
  Episode clean = episode;
  for (std::size_t i = 0; i < clean.query.size(); ++i) {
    clean.query[i].image = apply_preprocess(episode.query[i].image, spec, derive_seed(seed, "query", i));
  }
  EpisodeResult r = evaluate(clf, clean, trigger);
  int hits = 0, total = 0;
  // Pre-process after the trigger is applied, as a deployed pipeline would.
  std::vector<ImageTensor> imgs;
  for (std::size_t i = 0; i < episode.query.size(); ++i) {
    if (episode.query[i].label == episode.target_class) continue;
    imgs.push_back(apply_preprocess(trigger.apply(episode.query[i].image), spec,
                                    derive_seed(seed, "triggered-query", i)));
  }
  const int target = episode.class_position(episode.target_class);
  for (int p : clf.predict_indices(std::span<const ImageTensor>(imgs))) {
    hits += p == target;
    ++total;
  }
  r.attack_hits = hits;
  r.attack_queries = total;
  r.asr = total > 0 ? static_cast<double>(hits) / total : 0.0;
  return r;
}

// Neural Cleanse -----------------------------------------------------------------

struct NeuralCleanseConfig {
  int iterations = 100;
  double learning_rate = 0.1;
  double gamma = 0.01;  // mask L1 weight, fixed
  int max_probe_images = 20;
  std::uint64_t seed = 0;
};

struct AnomalyReport {
  std::vector<std::string> classes;
  std::vector<double> per_class_norms;  // L1 of the reverse-engineered mask
  std::vector<double> final_loss;
  int min_class = 0;
  double anomaly_index = 0.0;
  bool flagged = false;
};

class DefenseError : public Error {
 public:
  DefenseError(const std::string& message, std::vector<double> partial_norms)
      : Error(ErrorKind::kDefense, message), partial_(std::move(partial_norms)) {}
  const std::vector<double>& partial_norms() const { return partial_; }

 private:
  std::vector<double> partial_;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) fail(ErrorKind::kInput, "median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline constexpr double kMadConsistency = 1.4826;

// |x_i - median| / (1.4826 * MAD) for every entry. With MAD = 0 an entry at
// the median scores 0 and any other entry scores +inf.
inline std::vector<double> mad_anomaly_indices(const std::vector<double>& norms) {
  const double med = median_of(norms);
  std::vector<double> dev;
  for (double x : norms) dev.push_back(std::abs(x - med));
  const double mad = median_of(dev);
  std::vector<double> out;
  for (double d : dev) {
    if (mad == 0.0) {
      out.push_back(d == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
    } else {
      out.push_back(d / (kMadConsistency * mad));
    }
  }
  return out;
}

// Scores the smallest norm, the candidate trigger class.
inline AnomalyReport anomaly_report(std::vector<std::string> classes, std::vector<double> norms) {
  if (norms.size() < 3) fail(ErrorKind::kInput, "anomaly index needs at least 3 classes");
  AnomalyReport r;
  r.classes = std::move(classes);
  r.per_class_norms = std::move(norms);
  r.min_class = static_cast<int>(std::min_element(r.per_class_norms.begin(), r.per_class_norms.end()) -
                                 r.per_class_norms.begin());
  r.anomaly_index = mad_anomaly_indices(r.per_class_norms)[r.min_class];
  r.flagged = r.anomaly_index > 2.0;
  return r;
}

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

// For each class c, optimizes mask = sigmoid(a) (H x W) and pattern =
// sigmoid(b) (H x W x C) with Adam to minimize
//   mean CE(scores((1 - mask) x + mask pattern), c) + gamma * |mask|_1
// over the probe images.
template <typename S>
AnomalyReport neural_cleanse(const AdaptedClassifier<S>& clf, std::span<const ImageTensor> probe,
                             const NeuralCleanseConfig& cfg) {
  if (clf.num_classes() < 3) fail(ErrorKind::kInput, "Neural Cleanse needs at least 3 classes");
  if (probe.empty()) fail(ErrorKind::kInput, "Neural Cleanse needs probe images");
  if (cfg.iterations < 0 || !(cfg.learning_rate > 0) || !(cfg.gamma >= 0)) {
    fail(ErrorKind::kConfig, "invalid Neural Cleanse configuration");
  }
  const std::size_t np =
      std::min<std::size_t>(probe.size(), static_cast<std::size_t>(std::max(1, cfg.max_probe_images)));
  probe = probe.first(np);
  const int H = probe[0].height(), W = probe[0].width(), C = probe[0].channels();
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  std::vector<double> norms, losses;

  for (int cls = 0; cls < clf.num_classes(); ++cls) {
    Rng rng(derive_seed(cfg.seed, "neural-cleanse", static_cast<std::uint64_t>(cls)));
    std::vector<double> params(hw + hw * C);
    for (std::size_t i = 0; i < hw; ++i) params[i] = normal(rng, -2.0, 0.1);  // small initial mask
    for (std::size_t i = hw; i < params.size(); ++i) params[i] = normal(rng, 0.0, 0.1);
    Adam opt(cfg.learning_rate);
    std::vector<double> grad(params.size());
    std::vector<ImageTensor> stamped(np);
    double loss = 0.0;
    for (int it = 0; it <= cfg.iterations; ++it) {
      std::vector<double> mask(hw), pattern(hw * C);
      for (std::size_t i = 0; i < hw; ++i) mask[i] = detail::sigmoid(params[i]);
      for (std::size_t i = 0; i < hw * C; ++i) pattern[i] = detail::sigmoid(params[hw + i]);
      for (std::size_t k = 0; k < np; ++k) {
        stamped[k] = probe[k];
        auto px = stamped[k].mutable_pixels();
        for (std::size_t i = 0; i < hw; ++i)
          for (int c = 0; c < C; ++c) {
            double& v = px[i * C + c];
            v = (1 - mask[i]) * v + mask[i] * pattern[i * C + c];
          }
      }
      double l1 = 0.0;
      for (double m : mask) l1 += m;
      if (it == cfg.iterations) {
        const Eigen::MatrixXd s = clf.scores(std::span<const ImageTensor>(stamped));
        loss = softmax_cross_entropy(s, std::vector<int>(np, cls)).loss + cfg.gamma * l1;
        break;
      }
      double ce_total = 0.0;
      auto g = input_gradients(clf.embedding(), std::span<const ImageTensor>(stamped),
                               [&](std::size_t, const FeatureVector& f, FeatureVector* gf) {
                                 const Eigen::MatrixXd s = clf.scores_from_features(f);
                                 const CrossEntropy ce = softmax_cross_entropy(s, {cls});
                                 *gf = clf.scores_backward(f, ce.grad_logits.col(0) / np);
                                 ce_total += ce.loss / np;
                                 return ce.loss;
                               });
      if (!std::isfinite(ce_total)) {
        throw DefenseError("Neural Cleanse diverged on class '" + clf.class_order()[cls] + "'", norms);
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t k = 0; k < np; ++k) {
        auto px = probe[k].pixels();
        const auto& gx = g.gradients[k];
        for (std::size_t i = 0; i < hw; ++i)
          for (int c = 0; c < C; ++c) {
            const std::size_t j = i * C + c;
            grad[i] += gx[j] * (pattern[j] - px[j]);
            grad[hw + j] += gx[j] * mask[i];
          }
      }
      for (std::size_t i = 0; i < hw; ++i) grad[i] += cfg.gamma;
      for (std::size_t i = 0; i < hw; ++i) grad[i] *= mask[i] * (1 - mask[i]);
      for (std::size_t j = 0; j < hw * C; ++j) grad[hw + j] *= pattern[j] * (1 - pattern[j]);
      opt.step(params.data(), grad.data(), grad.size());
    }
    double l1 = 0.0;
    for (std::size_t i = 0; i < hw; ++i) l1 += detail::sigmoid(params[i]);
    if (!std::isfinite(l1) || !std::isfinite(loss)) {
      throw DefenseError("Neural Cleanse diverged on class '" + clf.class_order()[cls] + "'", norms);
    }
    norms.push_back(l1);
    losses.push_back(loss);
  }
  AnomalyReport r = anomaly_report(clf.class_order(), std::move(norms));
  r.final_loss = std::move(losses);
  return r;
}

}  // namespace flba

#endif  // FLBA_DEFENSE_HPP_
