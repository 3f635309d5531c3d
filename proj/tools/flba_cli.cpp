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

// flba: pretrain | attack | eval | defend | sweep.
//
// Exit codes: 0 success, 2 configuration, 3 missing or stale artifact,
// 4 numeric failure, 1 anything else.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#if __has_include(<CLI11.hpp>)
#include <CLI11.hpp>
#else
#include <CLI/CLI.hpp>
#endif
#include <nlohmann/json.hpp>

#include "flba/flba.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Model = flba::EmbeddingModel<float>;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitArtifact = 3;
constexpr int kExitNumeric = 4;

int exit_code_for(flba::ErrorKind k) {
  switch (k) {
    case flba::ErrorKind::kConfig: return kExitConfig;
    case flba::ErrorKind::kMissingArtifact: return kExitArtifact;
    case flba::ErrorKind::kNumeric:
    case flba::ErrorKind::kNumericDomain:
    case flba::ErrorKind::kTraining: return kExitNumeric;
    default: return kExitOther;
  }
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int workers = 0;
};

// Produced files and stage outcomes for one subcommand invocation.
class RunManifest {
 public:
  RunManifest(std::string command, const flba::ExperimentConfig& cfg, std::uint64_t fingerprint)
      : command_(std::move(command)), cfg_(cfg), fingerprint_(fingerprint), started_(utc_now()) {}

  void artifact(const fs::path& p) { artifacts_.push_back(p.string()); }
  void stage(const std::string& name, const std::string& status, const std::string& detail = {}) {
    json s{{"stage", name}, {"status", status}};
    if (!detail.empty()) s["detail"] = detail;
    stages_.push_back(std::move(s));
  }
  void set(const std::string& key, json value) { extra_[key] = std::move(value); }

  void write(const fs::path& dir, const std::string& status) {
    json j;
    j["command"] = command_;
    j["tool_version"] = flba::kToolVersion;
    j["config_fingerprint"] = flba::hex64(fingerprint_);
    j["started"] = started_;
    j["finished"] = utc_now();
    j["status"] = status;
    j["stages"] = stages_;
    j["artifacts"] = artifacts_;
    for (auto& [k, v] : extra_.items()) j[k] = v;
    j["config"] = flba::canonical_text(cfg_);
    const fs::path p = dir / (command_ + "_manifest.json");
    std::ofstream(p) << j.dump(2) << "\n";
  }

 private:
  std::string command_;
  flba::ExperimentConfig cfg_;
  std::uint64_t fingerprint_;
  std::string started_;
  json stages_ = json::array();
  json artifacts_ = json::array();
  json extra_ = json::object();
};

flba::ExperimentConfig resolve_config(const CommonOptions& o) {
  flba::ExperimentConfig cfg = o.config.empty() ? flba::ExperimentConfig{} : flba::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.output = o.out;
  if (o.workers > 0) cfg.workers = o.workers;
  auto problems = flba::validate(cfg);
  if (!problems.empty()) throw flba::ConfigError(std::move(problems));
  fs::create_directories(cfg.output);
  return cfg;
}

void write_text(const fs::path& p, const std::string& text, RunManifest& m) {
  std::ofstream out(p, std::ios::binary);
  if (!out) flba::fail(flba::ErrorKind::kIo, "cannot write " + p.string());
  out << text;
  m.artifact(p);
}

fs::path checkpoint_path(const flba::ExperimentConfig& cfg) { return fs::path(cfg.output) / "embedding.ckpt"; }

// Loads the checkpoint and checks it was produced by the same data and
// embedding settings.
std::shared_ptr<const Model> load_model(const flba::ExperimentConfig& cfg) {
  std::uint64_t fp = 0;
  auto model = flba::load_checkpoint<float>(checkpoint_path(cfg), &fp);
  const std::uint64_t want = flba::stage_fingerprint(cfg, flba::Stage::kPretrain);
  if (fp != want) {
    flba::fail(flba::ErrorKind::kMissingArtifact,
               "checkpoint fingerprint " + flba::hex64(fp) + " does not match the configuration (" +
                   flba::hex64(want) + "); re-run pretrain");
  }
  return std::make_shared<const Model>(std::move(model));
}

// pretrain ------------------------------------------------------------------

int cmd_pretrain(const CommonOptions& o, bool export_features) {
  const auto cfg = resolve_config(o);
  const std::uint64_t fp = flba::stage_fingerprint(cfg, flba::Stage::kPretrain);
  RunManifest m("pretrain", cfg, fp);
  const fs::path out(cfg.output);
  try {
    const auto data = flba::load_dataset(cfg);
    flba::validate(data);
    m.stage("dataset", "ok");
    auto result = flba::pretrain_embedding<float>(data.auxiliary, flba::pretrain_config(cfg));
    m.stage("pretrain", "ok");
    flba::save_checkpoint(result.model, checkpoint_path(cfg), fp);
    m.artifact(checkpoint_path(cfg));
    std::string loss = "epoch,loss\n";
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
      loss += std::to_string(e) + "," + flba::csv_real(result.epoch_loss[e]) + "\n";
    }
    write_text(out / "pretrain_loss.csv", loss, m);
    if (export_features) {
      flba::export_features(result.model, data.support_pool.examples, out / "features.csv");
      m.artifact(out / "features.csv");
    }
    m.set("probe_accuracy", result.probe_accuracy);
    m.set("chance", result.chance);
    m.write(out, "ok");
    std::cout << "checkpoint " << checkpoint_path(cfg).string() << "  probe accuracy "
              << result.probe_accuracy << "\n";
    return kExitOk;
  } catch (const flba::Error& e) {
    m.stage("pretrain", "error", e.what());
    m.write(out, "error");
    throw;
  }
}

// attack --------------------------------------------------------------------

struct AttackPaths {
  fs::path trigger, perturbations, poisoned;
};

AttackPaths attack_paths(const flba::ExperimentConfig& cfg) {
  const fs::path out(cfg.output);
  return {out / "trigger.flt", out / "perturbations.flp", out / "poisoned_set.fps"};
}

int cmd_attack(const CommonOptions& o) {
  const auto cfg = resolve_config(o);
  const std::uint64_t fp = flba::stage_fingerprint(cfg, flba::Stage::kAttack);
  RunManifest m("attack", cfg, fp);
  const fs::path out(cfg.output);
  const AttackPaths paths = attack_paths(cfg);
  std::string stage = "load";
  try {
    const auto model = load_model(cfg);
    const auto data = flba::load_dataset(cfg);
    m.stage(stage, "ok");
    const std::uint64_t seed = flba::episode_seed(cfg, 0, 0);
    const flba::Episode episode =
        flba::sample_episode(data.support_pool, data.query_pool, flba::episode_spec(cfg, seed));
    const std::string& mode = cfg.poison.mode;

    stage = "trigger";
    flba::TriggerSpec trig;
    double objective = 0.0;
    if (mode == "flba" || mode == "clean") {
      const flba::TriggerResult tr = cfg.trigger.scope == "global"
                                         ? flba::global_trigger(*model, data, cfg)
                                         : flba::optimize_episode_trigger(*model, data, cfg, episode);
      trig = tr.trigger;
      objective = tr.objective;
    } else {
      trig = flba::initial_trigger(cfg, seed);
    }
    flba::save_trigger(paths.trigger, trig, objective, fp);
    m.artifact(paths.trigger);
    m.stage(stage, "ok");

    stage = "perturb";
    flba::PerturbationBundle bundle;
    bundle.config = flba::perturb_config(cfg, flba::derive_seed(seed, "perturb"));
    bundle.fingerprint = fp;
    flba::PoisonedSupportSet set;
    if (mode == "flba") {
      set = flba::craft_hidden_poisoned_set(*model, episode, trig, bundle.config,
                                            flba::parse_poison_scope(cfg.poison.scope),
                                            &bundle.records);
      std::size_t warnings = 0;
      for (const auto& r : bundle.records) warnings += r.distance_warning;
      m.stage(stage, "ok", std::to_string(bundle.records.size()) + " records, " +
                               std::to_string(warnings) + " distance warnings");
    } else {
      m.stage(stage, "skipped", "poison.mode = " + mode);
    }
    flba::save_perturbations(paths.perturbations, bundle);
    m.artifact(paths.perturbations);

    stage = "poison";
    if (mode == "badnet" || mode == "blended") {
      flba::ComparatorAttackConfig cc;
      cc.method = mode == "badnet" ? flba::ComparatorMethod::kBadnetPatch : flba::ComparatorMethod::kBlended;
      cc.strength = mode == "badnet" ? cfg.poison.badnet_strength : cfg.poison.blended_strength;
      cc.poison_count_per_class = cfg.poison.poison_count;
      set = flba::build_comparator_set(episode, cc, trig);
    } else if (mode == "clean") {
      set.examples = episode.support;
    }
    flba::save_poisoned_set(paths.poisoned, set, fp);
    m.artifact(paths.poisoned);
    const flba::DiffReport diff = flba::diff_report(episode.support, set);
    std::string csv = "source_id,linf,mean_abs,label_changed\n";
    for (const auto& r : diff.rows) {
      csv += r.source_id + "," + flba::csv_real(r.linf) + "," + flba::csv_real(r.mean_abs) + "," +
             (r.label_changed ? "1" : "0") + "\n";
    }
    write_text(out / "stealth_report.csv", csv, m);
    m.stage(stage, "ok", std::to_string(set.examples.size()) + " support examples");
    m.set("episode_seed", flba::hex64(seed));
    m.set("target_class", episode.target_class);
    m.set("trigger_objective", objective);
    m.set("max_linf", diff.max_linf);
    m.set("label_changes", diff.label_changes);
    m.set("perturb", json{{"epsilon", cfg.perturb.epsilon},
                          {"step_size", cfg.perturb.step_size},
                          {"iterations", cfg.perturb.iterations},
                          {"lambda1", cfg.perturb.lambda1},
                          {"lambda2", cfg.perturb.lambda2}});
    m.set("trigger", json{{"size", flba::trigger_size(cfg)},
                          {"step_size", cfg.trigger.step_size},
                          {"iterations", cfg.trigger.iterations}});
    m.write(out, "ok");
    std::cout << "attack artifacts in " << out.string() << " (" << set.examples.size()
              << " support examples, max Linf " << diff.max_linf << ")\n";
    return kExitOk;
  } catch (const flba::Error& e) {
    m.stage(stage, "error", e.what());
    m.write(out, "error");
    throw;
  }
}

// eval ----------------------------------------------------------------------

// Loads the attack artifacts for episode (0, 0), checking fingerprints.
flba::EpisodeAttack load_attack(const flba::ExperimentConfig& cfg, const flba::DatasetSplits& data) {
  const AttackPaths paths = attack_paths(cfg);
  const std::uint64_t want = flba::stage_fingerprint(cfg, flba::Stage::kAttack);
  const flba::LoadedTrigger lt = flba::load_trigger(paths.trigger);
  const flba::PerturbationBundle pb = flba::load_perturbations(paths.perturbations);
  std::uint64_t set_fp = 0;
  flba::PoisonedSupportSet set = flba::load_poisoned_set(paths.poisoned, &set_fp);
  for (std::uint64_t fp : {lt.fingerprint, pb.fingerprint, set_fp}) {
    if (fp != want) {
      flba::fail(flba::ErrorKind::kMissingArtifact,
                 "attack artifacts were produced by a different configuration; re-run attack");
    }
  }
  flba::EpisodeAttack a;
  const std::uint64_t seed = flba::episode_seed(cfg, 0, 0);
  a.episode = flba::sample_episode(data.support_pool, data.query_pool, flba::episode_spec(cfg, seed));
  a.trigger = lt.trigger;
  a.trigger_objective = lt.objective;
  a.records = pb.records;
  a.support = std::move(set);
  if (cfg.poison.mode == "badnet" || cfg.poison.mode == "blended") {
    flba::ComparatorAttackConfig cc;
    cc.method = cfg.poison.mode == "badnet" ? flba::ComparatorMethod::kBadnetPatch
                                            : flba::ComparatorMethod::kBlended;
    cc.strength = cfg.poison.mode == "badnet" ? cfg.poison.badnet_strength : cfg.poison.blended_strength;
    a.applied = flba::comparator_trigger(cc, a.trigger);
  } else {
    a.applied = flba::AppliedTrigger::from_patch(a.trigger);
  }
  return a;
}

int cmd_eval(const CommonOptions& o) {
  const auto cfg = resolve_config(o);
  const std::uint64_t fp = flba::stage_fingerprint(cfg, flba::Stage::kEval);
  RunManifest m("eval", cfg, fp);
  const fs::path out(cfg.output);
  try {
    const auto model = load_model(cfg);
    const auto data = flba::load_dataset(cfg);
    std::optional<flba::EpisodeAttack> first;
    if (cfg.poison.mode != "clean") {
      first = load_attack(cfg, data);
      m.stage("resolve", "ok", "attack artifacts loaded");
    }
    flba::EvalReport rep = flba::run_experiment(model, data, cfg, cfg.workers, first ? &*first : nullptr);
    m.stage("evaluate", "ok");
    write_text(out / "eval_report.json", flba::to_json(rep).dump(2) + "\n", m);
    write_text(out / "eval_episodes.csv", flba::to_csv(rep), m);
    m.set("asr", rep.asr);
    m.set("ba", rep.ba);
    m.write(out, "ok");
    std::cout << rep.mode << " " << rep.paradigm << ": ASR " << rep.asr << " BA " << rep.ba << " over "
              << rep.n_episodes << " episodes\n";
    return kExitOk;
  } catch (const flba::Error& e) {
    m.stage("evaluate", "error", e.what());
    m.write(out, "error");
    throw;
  }
}

// defend --------------------------------------------------------------------

int cmd_defend(const CommonOptions& o) {
  const auto cfg = resolve_config(o);
  const std::uint64_t fp = flba::stage_fingerprint(cfg, flba::Stage::kDefend);
  RunManifest m("defend", cfg, fp);
  const fs::path out(cfg.output);
  try {
    const auto model = load_model(cfg);
    const auto data = flba::load_dataset(cfg);
    const auto has = [&](const std::string& p) {
      return std::find(cfg.defense.probes.begin(), cfg.defense.probes.end(), p) != cfg.defense.probes.end();
    };
    const flba::Paradigm paradigm = flba::parse_paradigm(cfg.eval.paradigm);
    std::optional<flba::TriggerResult> shared;
    if (cfg.trigger.scope == "global" && (cfg.poison.mode == "flba" || cfg.poison.mode == "clean")) {
      shared = flba::global_trigger(*model, data, cfg);
    }

    struct EpisodeDefense {
      std::vector<flba::TracePoint> trace;
      std::vector<std::pair<std::string, flba::EpisodeResult>> preprocess;  // key "kind,budget"
      std::optional<flba::AnomalyReport> nc;
      std::string nc_error;
    };
    const bool finetune = has("finetune") && paradigm != flba::Paradigm::kPrototype;
    if (has("finetune") && !finetune) {
      m.stage("finetune", "unsupported", "prototype classifiers are recomputed, not fine-tuned");
    }
    const auto results = flba::parallel_map<EpisodeDefense>(
        cfg.defense.episodes, cfg.workers, [&](int i) {
          const std::uint64_t seed = flba::episode_seed(cfg, 0, i);
          const flba::EpisodeAttack a =
              flba::craft_episode_attack(*model, data, cfg, seed, shared ? &*shared : nullptr);
          const auto clf = flba::adapt_classifier(model, a.support.examples, a.episode.class_order, cfg, seed);
          EpisodeDefense d;
          if (finetune) {
            flba::FinetuneConfig fc;
            fc.epochs = cfg.defense.finetune_epochs;
            fc.head = flba::head_config(cfg, flba::derive_seed(seed, "finetune"));
            fc.inner_lr = cfg.eval.inner_lr;
            const auto support = cfg.defense.finetune_support == "new"
                                     ? flba::new_support_set(data.support_pool, a.episode, cfg.eval.shots, seed)
                                     : a.episode.support;
            d.trace = flba::finetune_defense(clf, support, a.episode, a.applied, fc).trace;
          }
          if (has("preprocess")) {
            for (const auto& k : cfg.defense.preprocess_kinds) {
              for (double b : cfg.defense.preprocess_budgets) {
                const flba::PreprocessSpec ps{flba::parse_preprocess_kind(k), b};
                d.preprocess.emplace_back(k + "," + flba::csv_real(b),
                                          flba::evaluate_preprocessed(clf, a.episode, a.applied, ps,
                                                                      flba::derive_seed(seed, "preprocess")));
              }
            }
          }
          if (has("neural-cleanse")) {
            flba::NeuralCleanseConfig nc;
            nc.iterations = cfg.defense.nc_iterations;
            nc.learning_rate = cfg.defense.nc_learning_rate;
            nc.gamma = cfg.defense.nc_gamma;
            nc.max_probe_images = cfg.defense.nc_probe_images;
            nc.seed = flba::derive_seed(seed, "neural-cleanse");
            const auto probe = flba::images_of(a.episode.query);
            try {
              d.nc = flba::neural_cleanse(clf, std::span<const flba::ImageTensor>(probe), nc);
            } catch (const flba::DefenseError& e) {
              d.nc_error = e.what();
            }
          }
          return d;
        });

    if (finetune) {
      std::string csv = "episode,epoch,asr,ba\n";
      std::vector<double> asr(cfg.defense.finetune_epochs + 1, 0.0), ba(asr.size(), 0.0);
      for (std::size_t i = 0; i < results.size(); ++i) {
        for (const auto& p : results[i].trace) {
          csv += std::to_string(i) + "," + std::to_string(p.epoch) + "," + flba::csv_real(p.asr) + "," +
                 flba::csv_real(p.ba) + "\n";
          asr[p.epoch] += p.asr / results.size();
          ba[p.epoch] += p.ba / results.size();
        }
      }
      write_text(out / "defense_finetune.csv", csv, m);
      std::string mean = "epoch,asr,ba\n";
      for (std::size_t e = 0; e < asr.size(); ++e) {
        mean += std::to_string(e) + "," + flba::csv_real(asr[e]) + "," + flba::csv_real(ba[e]) + "\n";
      }
      write_text(out / "defense_finetune_mean.csv", mean, m);
      m.stage("finetune", "ok", cfg.defense.finetune_support + " support");
    }
    if (has("preprocess")) {
      std::string csv = "episode,transform,budget,asr,ba\n";
      std::vector<std::string> keys;
      std::vector<double> asr, ba;
      for (std::size_t i = 0; i < results.size(); ++i) {
        for (std::size_t k = 0; k < results[i].preprocess.size(); ++k) {
          const auto& [key, r] = results[i].preprocess[k];
          csv += std::to_string(i) + "," + key + "," + flba::csv_real(r.asr) + "," + flba::csv_real(r.ba) + "\n";
          if (i == 0) {
            keys.push_back(key);
            asr.push_back(0.0);
            ba.push_back(0.0);
          }
          asr[k] += r.asr / results.size();
          ba[k] += r.ba / results.size();
        }
      }
      write_text(out / "defense_preprocess.csv", csv, m);
      std::string mean = "transform,budget,asr,ba\n";
      for (std::size_t k = 0; k < keys.size(); ++k) {
        mean += keys[k] + "," + flba::csv_real(asr[k]) + "," + flba::csv_real(ba[k]) + "\n";
      }
      write_text(out / "defense_preprocess_mean.csv", mean, m);
      m.stage("preprocess", "ok");
    }
    if (has("neural-cleanse")) {
      std::string norms = "episode,class,mask_l1\n", summary = "episode,anomaly_index,flagged,min_class\n";
      json reports = json::array();
      int failures = 0;
      for (std::size_t i = 0; i < results.size(); ++i) {
        if (!results[i].nc) {
          ++failures;
          reports.push_back({{"episode", i}, {"error", results[i].nc_error}});
          continue;
        }
        const auto& r = *results[i].nc;
        for (std::size_t c = 0; c < r.classes.size(); ++c) {
          norms += std::to_string(i) + "," + r.classes[c] + "," + flba::csv_real(r.per_class_norms[c]) + "\n";
        }
        summary += std::to_string(i) + "," + flba::csv_real(r.anomaly_index) + "," + (r.flagged ? "1" : "0") +
                   "," + r.classes[r.min_class] + "\n";
        json norms_j = json::object();
        for (std::size_t c = 0; c < r.classes.size(); ++c) norms_j[r.classes[c]] = r.per_class_norms[c];
        reports.push_back({{"episode", i},
                           {"per_class_norms", norms_j},
                           {"anomaly_index", r.anomaly_index},
                           {"flagged", r.flagged}});
      }
      write_text(out / "defense_nc_norms.csv", norms, m);
      write_text(out / "defense_nc_summary.csv", summary, m);
      json j{{"config_fingerprint", flba::hex64(fp)}, {"reports", reports}};
      write_text(out / "defense_nc.json", j.dump(2) + "\n", m);
      m.stage("neural-cleanse", failures ? "partial" : "ok",
              failures ? std::to_string(failures) + " episode(s) diverged" : "");
    }
    m.write(out, "ok");
    std::cout << "defense results in " << out.string() << "\n";
    return kExitOk;
  } catch (const flba::Error& e) {
    m.stage("defend", "error", e.what());
    m.write(out, "error");
    throw;
  }
}

// sweep ---------------------------------------------------------------------

flba::ExperimentConfig apply_axis(flba::ExperimentConfig cfg, const std::string& axis, const std::string& value) {
  auto as_int = [&] {
    long long v;
    if (!flba::detail::parse_int(value, v)) throw flba::ConfigError({"sweep.values: '" + value + "' is not an integer"});
    return static_cast<int>(v);
  };
  auto as_real = [&] {
    double v;
    if (!flba::detail::parse_real(value, v)) throw flba::ConfigError({"sweep.values: '" + value + "' is not a number"});
    return v;
  };
  if (axis == "shots") cfg.eval.shots = as_int();
  else if (axis == "trigger_size") cfg.trigger.size = as_int();
  else if (axis == "lambda1") cfg.perturb.lambda1 = as_real();
  else if (axis == "lambda2") cfg.perturb.lambda2 = as_real();
  else if (axis == "poison_scope") cfg.poison.scope = value;
  else if (axis == "poison_count") cfg.poison.poison_count = as_int();
  auto problems = flba::validate(cfg);
  if (!problems.empty()) {
    for (auto& p : problems) p = "sweep value '" + value + "': " + p;
    throw flba::ConfigError(std::move(problems));
  }
  return cfg;
}

int cmd_sweep(const CommonOptions& o, const std::string& axis, const std::vector<std::string>& values) {
  auto cfg = resolve_config(o);
  if (!axis.empty()) cfg.sweep.axis = axis;
  if (!values.empty()) cfg.sweep.values = values;
  if (auto problems = flba::validate(cfg); !problems.empty()) throw flba::ConfigError(std::move(problems));
  const std::uint64_t fp = flba::stage_fingerprint(cfg, flba::Stage::kSweep);
  RunManifest m("sweep", cfg, fp);
  const fs::path out(cfg.output);
  std::vector<flba::ExperimentConfig> points;
  for (const auto& v : cfg.sweep.values) points.push_back(apply_axis(cfg, cfg.sweep.axis, v));
  try {
    const auto model = load_model(cfg);
    const auto data = flba::load_dataset(cfg);
    std::string csv = "axis,value,asr,ba,asr_std,ba_std,n_episodes\n";
    for (std::size_t i = 0; i < points.size(); ++i) {
      const auto rep = flba::run_experiment(model, data, points[i], cfg.workers);
      csv += cfg.sweep.axis + "," + cfg.sweep.values[i] + "," + flba::csv_real(rep.asr) + "," +
             flba::csv_real(rep.ba) + "," + flba::csv_real(rep.asr_std) + "," + flba::csv_real(rep.ba_std) +
             "," + std::to_string(rep.n_episodes) + "\n";
      m.stage(cfg.sweep.axis + "=" + cfg.sweep.values[i], "ok");
      std::cout << cfg.sweep.axis << "=" << cfg.sweep.values[i] << ": ASR " << rep.asr << " BA " << rep.ba << "\n";
    }
    write_text(out / "sweep.csv", csv, m);
    m.write(out, "ok");
    return kExitOk;
  } catch (const flba::Error& e) {
    m.stage("sweep", "error", e.what());
    m.write(out, "error");
    throw;
  }
}

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config, "Configuration file (INI sections of key = value)");
  sub->add_option("--seed", o.seed, "Override the configured seed");
  sub->add_option("--out", o.out, "Override the output directory");
  sub->add_option("--workers", o.workers, "Parallel episode workers")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot learning backdoor attack toolkit"};
  app.set_version_flag("--version", std::string(flba::kToolVersion));
  app.require_subcommand(1);
  CommonOptions opts;
  bool export_features = false;
  std::string axis;
  std::vector<std::string> values;

  auto* pre = app.add_subcommand("pretrain", "Pre-train the embedding on the auxiliary classes");
  add_common(pre, opts);
  pre->add_flag("--export-features", export_features, "Also write support-pool features to features.csv");
  auto* atk = app.add_subcommand("attack", "Trigger, perturbation and poisoned-set stages for one episode");
  add_common(atk, opts);
  auto* ev = app.add_subcommand("eval", "Episodic ASR/BA evaluation");
  add_common(ev, opts);
  auto* def = app.add_subcommand("defend", "Fine-tuning, pre-processing and Neural Cleanse probes");
  add_common(def, opts);
  auto* sw = app.add_subcommand("sweep", "One evaluation per value of a swept setting");
  add_common(sw, opts);
  sw->add_option("--axis", axis, "shots | trigger_size | lambda1 | lambda2 | poison_scope | poison_count");
  sw->add_option("--values", values, "Comma-separated axis values")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  try {
    if (*pre) return cmd_pretrain(opts, export_features);
    if (*atk) return cmd_attack(opts);
    if (*ev) return cmd_eval(opts);
    if (*def) return cmd_defend(opts);
    if (*sw) return cmd_sweep(opts, axis, values);
  } catch (const flba::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}
