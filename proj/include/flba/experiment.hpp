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

// Episodic attack pipeline: sample -> trigger -> perturb -> poison ->
// adapt -> evaluate, aggregated into an EvalReport.

#ifndef FLBA_EXPERIMENT_HPP_
#define FLBA_EXPERIMENT_HPP_

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "flba/adapt.hpp"
#include "flba/config.hpp"
#include "flba/dataset.hpp"
#include "flba/image_io.hpp"
#include "flba/perturb.hpp"
#include "flba/pretrain.hpp"
#include "flba/poison.hpp"
#include "flba/trigger.hpp"

namespace flba {

inline DatasetSplits load_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.source == "directory") {
    DirectoryLoadOptions opts;
    opts.resolution = cfg.dataset.resolution;
    return load_directory_dataset(cfg.dataset.root, cfg.dataset.manifest, opts);
  }
  SyntheticSpec s;
  s.num_classes = cfg.dataset.num_classes;
  s.per_class = cfg.dataset.per_class;
  s.resolution = cfg.dataset.resolution;
  s.seed = derive_seed(cfg.seed, "dataset");
  return generate_synthetic_dataset(s);
}

inline PretrainConfig pretrain_config(const ExperimentConfig& cfg) {
  PretrainConfig p;
  p.architecture = architecture_of(cfg);
  p.epochs = cfg.embedding.epochs;
  p.batch_size = cfg.embedding.batch_size;
  p.learning_rate = cfg.embedding.learning_rate;
  p.head_scale = cfg.embedding.head_scale;
  p.probe_margin = cfg.embedding.probe_margin;
  p.seed = derive_seed(cfg.seed, "pretrain");
  return p;
}

inline std::uint64_t episode_seed(const ExperimentConfig& cfg, int repeat, int index) {
  return derive_seed(cfg.seed, "episode",
                     (static_cast<std::uint64_t>(repeat) << 32) | static_cast<std::uint32_t>(index));
}

inline EpisodeSpec episode_spec(const ExperimentConfig& cfg, std::uint64_t seed) {
  EpisodeSpec s;
  s.ways = cfg.eval.ways;
  s.shots = cfg.eval.shots;
  s.queries_per_class = cfg.eval.queries;
  s.target_index = cfg.eval.target_index;
  s.seed = seed;
  return s;
}

inline HeadTrainConfig head_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  HeadTrainConfig h;
  h.iterations = cfg.eval.head_iterations;
  h.batch_size = cfg.eval.head_batch_size;
  h.learning_rate = cfg.eval.head_learning_rate;
  h.momentum = cfg.eval.head_momentum;
  h.weight_decay = cfg.eval.head_weight_decay;
  h.scale = cfg.eval.head_scale;
  h.seed = derive_seed(seed, "head");
  return h;
}

inline PerturbConfig perturb_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  PerturbConfig p;
  p.epsilon = cfg.perturb.epsilon;
  p.step_size = cfg.perturb.step_size;
  p.iterations = cfg.perturb.iterations;
  p.lambda1 = cfg.perturb.lambda1;
  p.lambda2 = cfg.perturb.lambda2;
  p.seed = seed;
  return p;
}

inline int trigger_size(const ExperimentConfig& cfg) {
  return cfg.trigger.size > 0 ? cfg.trigger.size : scaled_trigger_size(cfg.dataset.resolution);
}

inline TriggerSpec initial_trigger(const ExperimentConfig& cfg, std::uint64_t seed) {
  const Placement pl = cfg.trigger.placement == "top-left" ? Placement::kTopLeft
                       : cfg.trigger.placement == "center" ? Placement::kCenter
                                                           : Placement::kBottomRight;
  const TriggerInit init =
      cfg.trigger.init == "mid-gray" ? TriggerInit::kMidGray : TriggerInit::kUniformRandom;
  const int r = cfg.dataset.resolution, s = trigger_size(cfg);
  return make_trigger(r, r, 3, s, s, pl, init, derive_seed(seed, "trigger"));
}

// Everything an attacker produces for one episode.
struct EpisodeAttack {
  Episode episode;
  TriggerSpec trigger;  // optimized (flba, clean) or fixed patch (badnet)
  double trigger_objective = 0.0;
  AppliedTrigger applied;
  PoisonedSupportSet support;  // what the victim adapts on
  std::vector<PerturbationRecord> records;
};

template <typename S>
TriggerResult optimize_episode_trigger(const EmbeddingModel<S>& model, const DatasetSplits& data,
                                       const ExperimentConfig& cfg, const Episode& episode) {
  std::vector<ImageTensor> images;
  if (cfg.trigger.image_set == "random") {
    Rng rng(derive_seed(episode.seed, "trigger-images"));
    const std::size_t n = episode.support.size();
    for (std::size_t i = 0; i < n; ++i) {
      images.push_back(data.auxiliary.examples[uniform_index(rng, data.auxiliary.examples.size())].image);
    }
  } else {
    images = images_of(episode.support);
  }
  TriggerOptConfig tc;
  tc.step_size = cfg.trigger.step_size;
  tc.iterations = cfg.trigger.iterations;
  tc.seed = episode.seed;
  return optimize_trigger(model, std::span<const ImageTensor>(images),
                          initial_trigger(cfg, episode.seed), tc);
}

// A single trigger shared by all episodes (trigger.scope = global),
// optimized on a dedicated episode.
template <typename S>
TriggerResult global_trigger(const EmbeddingModel<S>& model, const DatasetSplits& data,
                             const ExperimentConfig& cfg) {
  const Episode ep = sample_episode(data.support_pool, data.query_pool,
                                    episode_spec(cfg, derive_seed(cfg.seed, "global-trigger")));
  return optimize_episode_trigger(model, data, cfg, ep);
}

template <typename S>
EpisodeAttack craft_episode_attack(const EmbeddingModel<S>& model, const DatasetSplits& data,
                                   const ExperimentConfig& cfg, std::uint64_t seed,
                                   const TriggerResult* shared_trigger = nullptr) {
  EpisodeAttack a;
  a.episode = sample_episode(data.support_pool, data.query_pool, episode_spec(cfg, seed));
  const std::string& mode = cfg.poison.mode;
  if (mode == "badnet" || mode == "blended") {
    ComparatorAttackConfig cc;
    cc.method = mode == "badnet" ? ComparatorMethod::kBadnetPatch : ComparatorMethod::kBlended;
    cc.strength = mode == "badnet" ? cfg.poison.badnet_strength : cfg.poison.blended_strength;
    cc.poison_count_per_class = cfg.poison.poison_count;
    a.trigger = initial_trigger(cfg, seed);
    a.applied = comparator_trigger(cc, a.trigger);
    a.support = build_comparator_set(a.episode, cc, a.trigger);
    return a;
  }
  if (shared_trigger != nullptr) {
    a.trigger = shared_trigger->trigger;
    a.trigger_objective = shared_trigger->objective;
  } else {
    const TriggerResult tr = optimize_episode_trigger(model, data, cfg, a.episode);
    a.trigger = tr.trigger;
    a.trigger_objective = tr.objective;
  }
  a.applied = AppliedTrigger::from_patch(a.trigger);
  if (mode == "clean") {
    a.support.examples = a.episode.support;
    return a;
  }
  a.support = craft_hidden_poisoned_set(model, a.episode, a.trigger,
                                        perturb_config(cfg, derive_seed(seed, "perturb")),
                                        parse_poison_scope(cfg.poison.scope), &a.records);
  return a;
}

template <typename S>
AdaptedClassifier<S> adapt_classifier(std::shared_ptr<const EmbeddingModel<S>> model,
                                      const std::vector<LabeledExample>& support,
                                      const std::vector<std::string>& class_order,
                                      const ExperimentConfig& cfg, std::uint64_t seed) {
  switch (parse_paradigm(cfg.eval.paradigm)) {
    case Paradigm::kCosineHead:
      return adapt_cosine_head(model, support, class_order, head_config(cfg, seed));
    case Paradigm::kPrototype: return adapt_prototypes(model, support, class_order);
    case Paradigm::kInnerLoop: {
      InnerLoopConfig ic;
      ic.steps = cfg.eval.inner_steps;
      ic.inner_lr = cfg.eval.inner_lr;
      ic.seed = derive_seed(seed, "inner-loop");
      return adapt_inner_loop(model, support, class_order, ic);
    }
  }
  fail(ErrorKind::kConfig, "unknown paradigm");
}

// Report ------------------------------------------------------------------------

struct EvalRow {
  int repeat = 0;
  int episode = 0;
  EpisodeResult result;
  double trigger_objective = 0.0;
  int perturbation_warnings = 0;
  int label_changes = 0;
  double max_linf = 0.0;
};

struct EvalReport {
  std::string mode;
  std::string paradigm;
  std::vector<EvalRow> rows;
  int n_episodes = 0;
  double asr = 0.0, ba = 0.0;
  double asr_std = 0.0, ba_std = 0.0;
  std::uint64_t config_fingerprint = 0;

  // Means and sample standard deviations, accumulated in row order.
  void aggregate() {
    n_episodes = static_cast<int>(rows.size());
    asr = ba = asr_std = ba_std = 0.0;
    if (rows.empty()) return;
    for (const auto& r : rows) {
      asr += r.result.asr;
      ba += r.result.ba;
    }
    asr /= n_episodes;
    ba /= n_episodes;
    if (n_episodes > 1) {
      for (const auto& r : rows) {
        asr_std += (r.result.asr - asr) * (r.result.asr - asr);
        ba_std += (r.result.ba - ba) * (r.result.ba - ba);
      }
      asr_std = std::sqrt(asr_std / (n_episodes - 1));
      ba_std = std::sqrt(ba_std / (n_episodes - 1));
    }
  }

  std::vector<double> asr_values() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.result.asr);
    return v;
  }
  std::vector<double> ba_values() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.result.ba);
    return v;
  }
};

inline std::string csv_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline const char* kEvalCsvHeader =
    "repeat,episode,seed,asr,ba,attack_hits,attack_queries,clean_correct,clean_queries,"
    "trigger_objective,perturbation_warnings,label_changes,max_linf";

inline std::string eval_csv_row(const EvalRow& r) {
  return std::to_string(r.repeat) + "," + std::to_string(r.episode) + "," + hex64(r.result.seed) + "," +
         csv_real(r.result.asr) + "," + csv_real(r.result.ba) + "," +
         std::to_string(r.result.attack_hits) + "," + std::to_string(r.result.attack_queries) + "," +
         std::to_string(r.result.clean_correct) + "," + std::to_string(r.result.clean_queries) + "," +
         csv_real(r.trigger_objective) + "," + std::to_string(r.perturbation_warnings) + "," +
         std::to_string(r.label_changes) + "," + csv_real(r.max_linf);
}

inline std::string to_csv(const EvalReport& rep) {
  std::string out = std::string(kEvalCsvHeader) + "\n";
  for (const auto& r : rep.rows) out += eval_csv_row(r) + "\n";
  return out;
}

inline nlohmann::ordered_json to_json(const EvalReport& rep) {
  nlohmann::ordered_json j;
  j["config_fingerprint"] = hex64(rep.config_fingerprint);
  j["mode"] = rep.mode;
  j["paradigm"] = rep.paradigm;
  j["n_episodes"] = rep.n_episodes;
  j["asr"] = rep.asr;
  j["ba"] = rep.ba;
  j["asr_std"] = rep.asr_std;
  j["ba_std"] = rep.ba_std;
  auto& rows = j["per_episode"] = nlohmann::ordered_json::array();
  for (const auto& r : rep.rows) {
    rows.push_back({{"repeat", r.repeat},
                    {"episode", r.episode},
                    {"seed", hex64(r.result.seed)},
                    {"asr", r.result.asr},
                    {"ba", r.result.ba},
                    {"attack_hits", r.result.attack_hits},
                    {"attack_queries", r.result.attack_queries},
                    {"clean_correct", r.result.clean_correct},
                    {"clean_queries", r.result.clean_queries},
                    {"trigger_objective", r.trigger_objective},
                    {"perturbation_warnings", r.perturbation_warnings},
                    {"label_changes", r.label_changes},
                    {"max_linf", r.max_linf}});
  }
  return j;
}

// Percentile bootstrap interval of the mean.
inline std::pair<double, double> bootstrap_interval(const std::vector<double>& values, double level,
                                                    int resamples, std::uint64_t seed) {
  if (values.empty()) fail(ErrorKind::kInput, "bootstrap of an empty sample");
  Rng rng(derive_seed(seed, "bootstrap"));
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[uniform_index(rng, values.size())];
    m = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  const double lo_q = (1.0 - level) / 2.0;
  auto at = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::floor(q * (means.size() - 1) + 0.5));
    return means[std::min(idx, means.size() - 1)];
  };
  return {at(lo_q), at(1.0 - lo_q)};
}

// Parallel map over [0, n) with results stored by index; the first failure
// in index order is rethrown.
template <typename T, typename F>
std::vector<T> parallel_map(int n, int workers, F&& fn) {
  std::vector<std::optional<T>> slots(static_cast<std::size_t>(n));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        slots[i].emplace(fn(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int w = std::max(1, std::min(workers, n));
  if (w == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < w; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  std::vector<T> out;
  out.reserve(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

// Adapts on the attack's support set and scores the episode.
template <typename S>
EvalRow score_attack(std::shared_ptr<const EmbeddingModel<S>> model, const ExperimentConfig& cfg,
                     const EpisodeAttack& a, int repeat, int index) {
  const auto clf = adapt_classifier(model, a.support.examples, a.episode.class_order, cfg, a.episode.seed);
  EvalRow row;
  row.repeat = repeat;
  row.episode = index;
  row.result = evaluate(clf, a.episode, a.applied);
  row.trigger_objective = a.trigger_objective;
  for (const auto& r : a.records) row.perturbation_warnings += r.distance_warning;
  const DiffReport d = diff_report(a.episode.support, a.support);
  row.label_changes = d.label_changes;
  row.max_linf = d.max_linf;
  return row;
}

template <typename S>
EvalRow run_episode(std::shared_ptr<const EmbeddingModel<S>> model, const DatasetSplits& data,
                    const ExperimentConfig& cfg, int repeat, int index,
                    const TriggerResult* shared_trigger = nullptr) {
  const std::uint64_t seed = episode_seed(cfg, repeat, index);
  try {
    return score_attack(model, cfg, craft_episode_attack(*model, data, cfg, seed, shared_trigger),
                        repeat, index);
  } catch (const Error& e) {
    throw Error(e.kind(), "episode seed " + hex64(seed) + ": " + e.message());
  }
}

// Runs eval.repeats x eval.episodes independent episodes. `first`, when
// given, replaces the crafted attack of repeat 0, episode 0 (e.g. artifacts
// loaded from disk).
template <typename S>
EvalReport run_experiment(std::shared_ptr<const EmbeddingModel<S>> model, const DatasetSplits& data,
                          const ExperimentConfig& cfg, int workers = 1,
                          const EpisodeAttack* first = nullptr) {
  std::optional<TriggerResult> shared;
  if (cfg.trigger.scope == "global" && (cfg.poison.mode == "flba" || cfg.poison.mode == "clean")) {
    shared = global_trigger(*model, data, cfg);
  }
  const int per = cfg.eval.episodes;
  const int total = per * cfg.eval.repeats;
  EvalReport rep;
  rep.mode = cfg.poison.mode;
  rep.paradigm = cfg.eval.paradigm;
  rep.config_fingerprint = stage_fingerprint(cfg, Stage::kEval);
  rep.rows = parallel_map<EvalRow>(total, workers, [&](int i) {
    if (i == 0 && first != nullptr) return score_attack(model, cfg, *first, 0, 0);
    return run_episode(model, data, cfg, i / per, i % per, shared ? &*shared : nullptr);
  });
  rep.aggregate();
  return rep;
}

}  // namespace flba

#endif  // FLBA_EXPERIMENT_HPP_
