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

// Experiment configuration: INI-style "key = value" sections, parsed with
// Boost.PropertyTree. Real values accept fractions such as 8/255.
// docs/config.md lists every key.

#ifndef FLBA_CONFIG_HPP_
#define FLBA_CONFIG_HPP_

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "flba/common.hpp"
#include "flba/nn/network.hpp"

namespace flba {

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | directory
  int num_classes = 10;
  int per_class = 60;
  int resolution = 32;
  std::string root;
  std::string manifest;
};

struct EmbeddingConfig {
  std::string architecture = "conv";
  std::vector<int> widths{16, 32, 64};
  int epochs = 15;
  int batch_size = 32;
  double learning_rate = 2e-3;
  double head_scale = 10.0;
  double probe_margin = 0.0;
};

struct TriggerConfig {
  int size = 0;  // 0: scaled from 16 px at 84 px
  std::string placement = "bottom-right";
  std::string init = "uniform-random";
  double step_size = 2.0 / 255.0;
  int iterations = 100;
  std::string scope = "per-episode";  // per-episode | global
  std::string image_set = "support";  // support | random
};

struct PerturbBlock {
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int iterations = 80;
  double lambda1 = 1.5;
  double lambda2 = 1.5;
};

struct PoisonConfig {
  std::string mode = "flba";  // flba | clean | badnet | blended
  std::string scope = "all";
  int poison_count = 1;
  double badnet_strength = 1.0;
  double blended_strength = 0.2;
};

struct EvalConfig {
  std::string paradigm = "cosine-head";
  int ways = 5;
  int shots = 5;
  int queries = 15;
  int episodes = 100;
  int repeats = 1;
  int target_index = 0;
  int head_iterations = 100;
  int head_batch_size = 4;
  double head_learning_rate = 0.05;
  double head_momentum = 0.9;
  double head_weight_decay = 0.001;
  double head_scale = 10.0;
  int inner_steps = 10;
  double inner_lr = 0.01;
};

struct DefenseConfig {
  std::vector<std::string> probes{"finetune", "preprocess", "neural-cleanse"};
  int episodes = 10;
  int finetune_epochs = 10;
  std::string finetune_support = "original";  // original | new
  std::vector<std::string> preprocess_kinds{"brightness", "contrast", "saturation", "hue"};
  std::vector<double> preprocess_budgets{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  int nc_iterations = 100;
  double nc_learning_rate = 0.1;
  double nc_gamma = 0.01;
  int nc_probe_images = 20;
};

struct SweepConfig {
  std::string axis = "shots";
  std::vector<std::string> values{"1", "5", "15"};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output = "flba-out";
  int workers = 1;
  DatasetConfig dataset;
  EmbeddingConfig embedding;
  TriggerConfig trigger;
  PerturbBlock perturb;
  PoisonConfig poison;
  EvalConfig eval;
  DefenseConfig defense;
  SweepConfig sweep;
};

// Value parsing ---------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline bool parse_real(const std::string& text, double& out) {
  const std::string s = trim(text);
  const auto slash = s.find('/');
  try {
    std::size_t used = 0;
    if (slash == std::string::npos) {
      out = std::stod(s, &used);
      return used == s.size();
    }
    const std::string a = trim(s.substr(0, slash)), b = trim(s.substr(slash + 1));
    std::size_t ua = 0, ub = 0;
    const double num = std::stod(a, &ua), den = std::stod(b, &ub);
    if (ua != a.size() || ub != b.size() || den == 0.0) return false;
    out = num / den;
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

inline bool parse_int(const std::string& text, long long& out) {
  const std::string s = trim(text);
  try {
    std::size_t used = 0;
    out = std::stoll(s, &used);
    return used == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, double>) {
      out += format_real(v[i]);
    } else if constexpr (std::is_same_v<T, std::string>) {
      out += v[i];
    } else {
      out += std::to_string(v[i]);
    }
  }
  return out;
}

// Binds config fields to "section.key" names for reading and for the
// canonical text form.
class Binder {
 public:
  struct Field {
    std::string key;
    std::function<bool(const std::string&)> set;  // false on a bad value
    std::function<std::string()> get;
    std::string expected;
  };

  void integer(const std::string& key, int& v) {
    fields_.push_back({key,
                       [&v](const std::string& s) {
                         long long x;
                         if (!parse_int(s, x)) return false;
                         v = static_cast<int>(x);
                         return true;
                       },
                       [&v] { return std::to_string(v); }, "an integer"});
  }
  void seed(const std::string& key, std::uint64_t& v) {
    fields_.push_back({key,
                       [&v](const std::string& s) {
                         const std::string t = trim(s);
                         if (t.empty() || t[0] == '-') return false;
                         try {
                           std::size_t used = 0;
                           v = std::stoull(t, &used);
                           return used == t.size();
                         } catch (const std::exception&) {
                           return false;
                         }
                       },
                       [&v] { return std::to_string(v); }, "a non-negative integer"});
  }
  void real(const std::string& key, double& v) {
    fields_.push_back({key, [&v](const std::string& s) { return parse_real(s, v); },
                       [&v] { return format_real(v); }, "a real number or fraction"});
  }
  void text(const std::string& key, std::string& v) {
    fields_.push_back({key,
                       [&v](const std::string& s) {
                         v = trim(s);
                         return true;
                       },
                       [&v] { return v; }, "text"});
  }
  void int_list(const std::string& key, std::vector<int>& v) {
    fields_.push_back({key,
                       [&v](const std::string& s) {
                         std::vector<int> out;
                         for (const auto& item : split_list(s)) {
                           long long x;
                           if (!parse_int(item, x)) return false;
                           out.push_back(static_cast<int>(x));
                         }
                         v = out;
                         return true;
                       },
                       [&v] { return join(v); }, "a comma-separated integer list"});
  }
  void real_list(const std::string& key, std::vector<double>& v) {
    fields_.push_back({key,
                       [&v](const std::string& s) {
                         std::vector<double> out;
                         for (const auto& item : split_list(s)) {
                           double x;
                           if (!parse_real(item, x)) return false;
                           out.push_back(x);
                         }
                         v = out;
                         return true;
                       },
                       [&v] { return join(v); }, "a comma-separated real list"});
  }
  void text_list(const std::string& key, std::vector<std::string>& v) {
    fields_.push_back({key,
                       [&v](const std::string& s) {
                         v = split_list(s);
                         return true;
                       },
                       [&v] { return join(v); }, "a comma-separated list"});
  }

  const std::vector<Field>& fields() const { return fields_; }

 private:
  std::vector<Field> fields_;
};

inline void bind_all(ExperimentConfig& c, Binder& b) {
  b.seed("seed", c.seed);
  b.text("output", c.output);
  b.integer("workers", c.workers);

  b.text("dataset.source", c.dataset.source);
  b.integer("dataset.num_classes", c.dataset.num_classes);
  b.integer("dataset.per_class", c.dataset.per_class);
  b.integer("dataset.resolution", c.dataset.resolution);
  b.text("dataset.root", c.dataset.root);
  b.text("dataset.manifest", c.dataset.manifest);

  b.text("embedding.architecture", c.embedding.architecture);
  b.int_list("embedding.widths", c.embedding.widths);
  b.integer("embedding.epochs", c.embedding.epochs);
  b.integer("embedding.batch_size", c.embedding.batch_size);
  b.real("embedding.learning_rate", c.embedding.learning_rate);
  b.real("embedding.head_scale", c.embedding.head_scale);
  b.real("embedding.probe_margin", c.embedding.probe_margin);

  b.integer("trigger.size", c.trigger.size);
  b.text("trigger.placement", c.trigger.placement);
  b.text("trigger.init", c.trigger.init);
  b.real("trigger.step_size", c.trigger.step_size);
  b.integer("trigger.iterations", c.trigger.iterations);
  b.text("trigger.scope", c.trigger.scope);
  b.text("trigger.image_set", c.trigger.image_set);

  b.real("perturb.epsilon", c.perturb.epsilon);
  b.real("perturb.step_size", c.perturb.step_size);
  b.integer("perturb.iterations", c.perturb.iterations);
  b.real("perturb.lambda1", c.perturb.lambda1);
  b.real("perturb.lambda2", c.perturb.lambda2);

  b.text("poison.mode", c.poison.mode);
  b.text("poison.scope", c.poison.scope);
  b.integer("poison.poison_count", c.poison.poison_count);
  b.real("poison.badnet_strength", c.poison.badnet_strength);
  b.real("poison.blended_strength", c.poison.blended_strength);

  b.text("eval.paradigm", c.eval.paradigm);
  b.integer("eval.ways", c.eval.ways);
  b.integer("eval.shots", c.eval.shots);
  b.integer("eval.queries", c.eval.queries);
  b.integer("eval.episodes", c.eval.episodes);
  b.integer("eval.repeats", c.eval.repeats);
  b.integer("eval.target_index", c.eval.target_index);
  b.integer("eval.head_iterations", c.eval.head_iterations);
  b.integer("eval.head_batch_size", c.eval.head_batch_size);
  b.real("eval.head_learning_rate", c.eval.head_learning_rate);
  b.real("eval.head_momentum", c.eval.head_momentum);
  b.real("eval.head_weight_decay", c.eval.head_weight_decay);
  b.real("eval.head_scale", c.eval.head_scale);
  b.integer("eval.inner_steps", c.eval.inner_steps);
  b.real("eval.inner_lr", c.eval.inner_lr);

  b.text_list("defense.probes", c.defense.probes);
  b.integer("defense.episodes", c.defense.episodes);
  b.integer("defense.finetune_epochs", c.defense.finetune_epochs);
  b.text("defense.finetune_support", c.defense.finetune_support);
  b.text_list("defense.preprocess_kinds", c.defense.preprocess_kinds);
  b.real_list("defense.preprocess_budgets", c.defense.preprocess_budgets);
  b.integer("defense.nc_iterations", c.defense.nc_iterations);
  b.real("defense.nc_learning_rate", c.defense.nc_learning_rate);
  b.real("defense.nc_gamma", c.defense.nc_gamma);
  b.integer("defense.nc_probe_images", c.defense.nc_probe_images);

  b.text("sweep.axis", c.sweep.axis);
  b.text_list("sweep.values", c.sweep.values);
}

}  // namespace detail

// Reports every violation at once.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : Error(ErrorKind::kConfig, join_lines(violations)), violations_(std::move(violations)) {}
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string join_lines(const std::vector<std::string>& v) {
    std::string out = std::to_string(v.size()) + " configuration problem(s):";
    for (const auto& s : v) out += "\n  " + s;
    return out;
  }
  std::vector<std::string> violations_;
};

// Structural checks that do not depend on which subcommand runs.
inline std::vector<std::string> validate(const ExperimentConfig& c) {
  std::vector<std::string> v;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) v.push_back(msg);
  };
  const auto one_of = [](const std::string& s, std::initializer_list<const char*> opts) {
    for (const char* o : opts) {
      if (s == o) return true;
    }
    return false;
  };
  need(c.workers >= 1, "workers: must be at least 1");
  need(!c.output.empty(), "output: must not be empty");
  need(one_of(c.dataset.source, {"synthetic", "directory"}),
       "dataset.source: expected synthetic or directory");
  if (c.dataset.source == "directory") {
    need(!c.dataset.root.empty(), "dataset.root: required when dataset.source = directory");
    need(!c.dataset.manifest.empty(), "dataset.manifest: required when dataset.source = directory");
  }
  need(c.dataset.num_classes >= 6, "dataset.num_classes: must be at least 6");
  need(c.dataset.per_class >= 2, "dataset.per_class: must be at least 2");
  need(c.dataset.resolution >= 4, "dataset.resolution: must be at least 4");
  need(one_of(c.embedding.architecture, {"conv", "resnet12", "identity", "scaled-identity"}),
       "embedding.architecture: expected conv, resnet12, identity or scaled-identity");
  for (int w : c.embedding.widths) need(w > 0, "embedding.widths: entries must be positive");
  need(c.embedding.epochs >= 0, "embedding.epochs: must be non-negative");
  need(c.embedding.batch_size >= 1, "embedding.batch_size: must be positive");
  need(c.embedding.learning_rate > 0, "embedding.learning_rate: must be positive");
  need(c.trigger.size >= 0, "trigger.size: must be non-negative");
  need(c.trigger.size == 0 || 2 * c.trigger.size <= c.dataset.resolution,
       "trigger.size: resolution must be at least twice the trigger size");
  need(one_of(c.trigger.placement, {"bottom-right", "top-left", "center"}),
       "trigger.placement: expected bottom-right, top-left or center");
  need(one_of(c.trigger.init, {"uniform-random", "mid-gray"}),
       "trigger.init: expected uniform-random or mid-gray");
  need(c.trigger.step_size > 0, "trigger.step_size: must be positive");
  need(c.trigger.iterations >= 0, "trigger.iterations: must be non-negative");
  need(one_of(c.trigger.scope, {"per-episode", "global"}),
       "trigger.scope: expected per-episode or global");
  need(one_of(c.trigger.image_set, {"support", "random"}),
       "trigger.image_set: expected support or random");
  need(c.perturb.epsilon >= 0, "perturb.epsilon: must be non-negative");
  need(c.perturb.step_size > 0, "perturb.step_size: must be positive");
  need(c.perturb.iterations >= 0, "perturb.iterations: must be non-negative");
  need(c.perturb.lambda1 >= 0, "perturb.lambda1: must be non-negative");
  need(c.perturb.lambda2 >= 0, "perturb.lambda2: must be non-negative");
  need(one_of(c.poison.mode, {"flba", "clean", "badnet", "blended"}),
       "poison.mode: expected flba, clean, badnet or blended");
  need(one_of(c.poison.scope, {"target-only", "untargeted-only", "all"}),
       "poison.scope: expected target-only, untargeted-only or all");
  need(c.poison.poison_count >= 0, "poison.poison_count: must be non-negative");
  need(c.poison.poison_count <= c.eval.shots, "poison.poison_count: must not exceed eval.shots");
  need(c.poison.badnet_strength >= 0 && c.poison.badnet_strength <= 1,
       "poison.badnet_strength: must lie in [0, 1]");
  need(c.poison.blended_strength >= 0 && c.poison.blended_strength <= 1,
       "poison.blended_strength: must lie in [0, 1]");
  need(one_of(c.eval.paradigm, {"cosine-head", "prototype", "inner-loop"}),
       "eval.paradigm: expected cosine-head, prototype or inner-loop");
  need(c.eval.ways >= 2, "eval.ways: must be at least 2");
  need(c.eval.shots >= 1, "eval.shots: must be positive");
  need(c.eval.queries >= 1, "eval.queries: must be positive");
  need(c.eval.episodes >= 1, "eval.episodes: must be positive");
  need(c.eval.repeats >= 1, "eval.repeats: must be positive");
  need(c.eval.target_index >= 0 && c.eval.target_index < c.eval.ways,
       "eval.target_index: must lie in [0, eval.ways)");
  need(c.eval.head_iterations >= 0, "eval.head_iterations: must be non-negative");
  need(c.eval.head_batch_size >= 1, "eval.head_batch_size: must be positive");
  need(c.eval.inner_steps >= 0, "eval.inner_steps: must be non-negative");
  need(c.defense.episodes >= 1, "defense.episodes: must be positive");
  need(c.defense.finetune_epochs >= 0, "defense.finetune_epochs: must be non-negative");
  need(one_of(c.defense.finetune_support, {"original", "new"}),
       "defense.finetune_support: expected original or new");
  need(!c.defense.probes.empty(), "defense.probes: must list at least one probe");
  for (const auto& p : c.defense.probes) {
    need(one_of(p, {"finetune", "preprocess", "neural-cleanse"}),
         "defense.probes: unknown probe '" + p + "'");
  }
  for (const auto& k : c.defense.preprocess_kinds) {
    need(one_of(k, {"brightness", "contrast", "saturation", "hue"}),
         "defense.preprocess_kinds: unknown transform '" + k + "'");
  }
  for (double b : c.defense.preprocess_budgets) {
    need(b >= 0 && b <= 0.5, "defense.preprocess_budgets: entries must lie in [0, 0.5]");
  }
  need(c.defense.nc_iterations >= 0, "defense.nc_iterations: must be non-negative");
  need(c.defense.nc_learning_rate > 0, "defense.nc_learning_rate: must be positive");
  need(c.defense.nc_gamma >= 0, "defense.nc_gamma: must be non-negative");
  need(c.defense.nc_probe_images >= 1, "defense.nc_probe_images: must be positive");
  need(one_of(c.sweep.axis,
              {"shots", "trigger_size", "lambda1", "lambda2", "poison_scope", "poison_count"}),
       "sweep.axis: expected shots, trigger_size, lambda1, lambda2, poison_scope or poison_count");
  need(!c.sweep.values.empty(), "sweep.values: must not be empty");
  return v;
}

// Parses config text. Unknown keys, malformed values and failed checks are
// all collected into one ConfigError.
inline ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError({std::string("syntax: ") + e.message() + " (line " +
                       std::to_string(e.line()) + ")"});
  }
  ExperimentConfig cfg;
  detail::Binder b;
  detail::bind_all(cfg, b);
  std::map<std::string, const detail::Binder::Field*> by_key;
  for (const auto& f : b.fields()) by_key[f.key] = &f;
  std::vector<std::string> problems;
  auto visit = [&](const std::string& key, const std::string& value) {
    auto it = by_key.find(key);
    if (it == by_key.end()) {
      problems.push_back(key + ": unknown key");
    } else if (!it->second->set(value)) {
      problems.push_back(key + ": expected " + it->second->expected + ", got '" + value + "'");
    }
  };
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      visit(name, node.data());
    } else {
      for (const auto& [key, leaf] : node) visit(name + "." + key, leaf.data());
    }
  }
  for (auto& p : validate(cfg)) problems.push_back(std::move(p));
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"config file " + path.string() + " not found"});
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Canonical "section.key = value" lines, sorted; the input to fingerprints.
inline std::string canonical_text(const ExperimentConfig& cfg, const std::string& prefix_filter = {}) {
  ExperimentConfig copy = cfg;
  detail::Binder b;
  detail::bind_all(copy, b);
  std::vector<std::string> lines;
  for (const auto& f : b.fields()) {
    if (!prefix_filter.empty() && f.key.rfind(prefix_filter, 0) != 0) continue;
    lines.push_back(f.key + " = " + f.get());
  }
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

// INI text that parses back to the same configuration.
inline std::string to_ini(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  detail::Binder b;
  detail::bind_all(copy, b);
  std::string out, section;
  for (const auto& f : b.fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    const std::string key = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += key + " = " + f.get() + "\n";
  }
  return out;
}

// Stage fingerprints. Each covers exactly the settings its artifacts depend
// on, so e.g. changing eval.episodes does not invalidate a checkpoint.
enum class Stage { kPretrain, kAttack, kEval, kDefend, kSweep };

inline std::uint64_t stage_fingerprint(const ExperimentConfig& cfg, Stage stage) {
  std::string text = "seed = " + std::to_string(cfg.seed) + "\n" + canonical_text(cfg, "dataset.") +
                     canonical_text(cfg, "embedding.");
  if (stage != Stage::kPretrain) {
    text += canonical_text(cfg, "trigger.") + canonical_text(cfg, "perturb.") +
            canonical_text(cfg, "poison.") + canonical_text(cfg, "eval.");
  }
  if (stage == Stage::kDefend) text += canonical_text(cfg, "defense.");
  if (stage == Stage::kSweep) text += canonical_text(cfg, "sweep.");
  return fnv1a(text);
}

inline std::uint64_t config_fingerprint(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  copy.output.clear();
  copy.workers = 1;
  return fnv1a(canonical_text(copy));
}

inline nn::Architecture architecture_of(const ExperimentConfig& cfg) {
  nn::Architecture a;
  a.name = cfg.embedding.architecture;
  a.widths = cfg.embedding.widths;
  a.input = {3, cfg.dataset.resolution, cfg.dataset.resolution};
  return a;
}

}  // namespace flba

#endif  // FLBA_CONFIG_HPP_
