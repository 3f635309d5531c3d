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

// Poisoned support sets: the clean-label hidden set built from
// perturbation records, and dirty-label comparators (patch, blend).

#ifndef FLBA_POISON_HPP_
#define FLBA_POISON_HPP_

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "flba/artifact_io.hpp"
#include "flba/dataset.hpp"
#include "flba/perturb.hpp"
#include "flba/trigger.hpp"

namespace flba {

enum class PoisonScope { kTargetOnly, kUntargetedOnly, kAll };

inline const char* to_string(PoisonScope s) {
  switch (s) {
    case PoisonScope::kTargetOnly: return "target-only";
    case PoisonScope::kUntargetedOnly: return "untargeted-only";
    case PoisonScope::kAll: return "all";
  }
  return "?";
}

inline PoisonScope parse_poison_scope(const std::string& s) {
  if (s == "target-only") return PoisonScope::kTargetOnly;
  if (s == "untargeted-only") return PoisonScope::kUntargetedOnly;
  if (s == "all") return PoisonScope::kAll;
  fail(ErrorKind::kConfig, "unknown poison scope '" + s + "'");
}

// Provenance tags.
inline constexpr const char* kTagClean = "clean";
inline constexpr const char* kTagBadnet = "badnet-patch";
inline constexpr const char* kTagBlended = "blended";

struct PoisonedSupportSet {
  std::vector<LabeledExample> examples;
  // source_id -> "attractive" | "repulsive" | "badnet-patch" | "blended";
  // examples passed through unchanged are absent.
  std::map<std::string, std::string> provenance;
  PoisonScope scope = PoisonScope::kAll;
  // Bound the hidden perturbations were built with; 0 for comparators.
  double epsilon = 0.0;
  bool dirty_label = false;
};

// Which support examples a scope perturbs, with the kind each needs.
struct PerturbationPlan {
  std::vector<std::size_t> indices;
  std::vector<PerturbationKind> kinds;
};

inline PerturbationPlan plan_perturbations(const Episode& episode, PoisonScope scope) {
  PerturbationPlan plan;
  for (std::size_t i = 0; i < episode.support.size(); ++i) {
    const bool target = episode.support[i].label == episode.target_class;
    if (target && scope != PoisonScope::kUntargetedOnly) {
      plan.indices.push_back(i);
      plan.kinds.push_back(PerturbationKind::kAttractive);
    } else if (!target && scope != PoisonScope::kTargetOnly) {
      plan.indices.push_back(i);
      plan.kinds.push_back(PerturbationKind::kRepulsive);
    }
  }
  return plan;
}

// Replaces the support images selected by `scope` with clip(image + delta).
// Records are matched by source_id and must cover the selection exactly.
inline PoisonedSupportSet build_hidden_poisoned_set(const Episode& episode,
                                                    const std::vector<PerturbationRecord>& records,
                                                    PoisonScope scope) {
  const PerturbationPlan plan = plan_perturbations(episode, scope);
  std::map<std::string, const PerturbationRecord*> by_id;
  for (const auto& r : records) {
    if (!by_id.emplace(r.source_id, &r).second) {
      fail(ErrorKind::kConstruction, "duplicate perturbation record for '" + r.source_id + "'");
    }
  }
  PoisonedSupportSet out;
  out.scope = scope;
  out.examples = episode.support;
  std::size_t used = 0;
  for (std::size_t k = 0; k < plan.indices.size(); ++k) {
    LabeledExample& ex = out.examples[plan.indices[k]];
    auto it = by_id.find(ex.source_id);
    if (it == by_id.end()) {
      fail(ErrorKind::kConstruction, "no perturbation record for '" + ex.source_id + "'");
    }
    const PerturbationRecord& rec = *it->second;
    if (rec.kind != plan.kinds[k]) {
      fail(ErrorKind::kConstruction, "record for '" + ex.source_id + "' is " + to_string(rec.kind) +
                                         " but its class needs " + to_string(plan.kinds[k]));
    }
    if (rec.delta.size() != ex.image.size()) {
      fail(ErrorKind::kConstruction, "record for '" + ex.source_id + "' has the wrong size");
    }
    ex.image = apply_delta(ex.image, rec.delta);
    out.provenance[ex.source_id] = to_string(rec.kind);
    out.epsilon = std::max(out.epsilon, rec.linf());
    ++used;
  }
  if (used != records.size()) {
    for (const auto& r : records) {
      if (!out.provenance.contains(r.source_id)) {
        fail(ErrorKind::kConstruction, "record for '" + r.source_id + "' matches no " +
                                           std::string(to_string(scope)) + " support example");
      }
    }
  }
  return out;
}

// Runs the perturbation optimizer for every example the scope selects and
// builds the hidden set.
template <typename S>
PoisonedSupportSet craft_hidden_poisoned_set(const EmbeddingModel<S>& model, const Episode& episode,
                                             const TriggerSpec& trig, const PerturbConfig& cfg,
                                             PoisonScope scope,
                                             std::vector<PerturbationRecord>* records_out = nullptr) {
  const PerturbationPlan plan = plan_perturbations(episode, scope);
  std::vector<ImageTensor> images;
  std::vector<std::string> ids;
  for (std::size_t i : plan.indices) {
    images.push_back(episode.support[i].image);
    ids.push_back(episode.support[i].source_id);
  }
  std::vector<PerturbationRecord> records =
      optimize_perturbations(model, std::span<const ImageTensor>(images),
                             std::span<const std::string>(ids),
                             std::span<const PerturbationKind>(plan.kinds), trig, cfg);
  PoisonedSupportSet out = build_hidden_poisoned_set(episode, records, scope);
  out.epsilon = cfg.epsilon;
  if (records_out != nullptr) *records_out = std::move(records);
  return out;
}

// Comparators ---------------------------------------------------------------

enum class ComparatorMethod { kBadnetPatch, kBlended };

inline const char* to_string(ComparatorMethod m) {
  return m == ComparatorMethod::kBadnetPatch ? kTagBadnet : kTagBlended;
}

struct ComparatorAttackConfig {
  ComparatorMethod method = ComparatorMethod::kBadnetPatch;
  // Opacity of the patch (badnet) or of the full-image pattern (blended).
  double strength = 1.0;
  // Empty means the episode's target class.
  std::string dirty_label_target;
  int poison_count_per_class = 1;
};

// A test-time trigger: a patch, or an alpha blend with a full-image pattern.
struct AppliedTrigger {
  enum class Kind { kPatch, kFullImage };
  Kind kind = Kind::kPatch;
  TriggerSpec patch;
  ImageTensor pattern;
  double alpha = 1.0;

  static AppliedTrigger from_patch(const TriggerSpec& t, double alpha = 1.0) {
    AppliedTrigger a;
    a.patch = t;
    a.alpha = alpha;
    return a;
  }

  ImageTensor apply(const ImageTensor& image) const {
    if (kind == Kind::kPatch) {
      if (alpha == 1.0) return blend(image, patch);
      check_trigger_fits(image, patch);
      ImageTensor out = image;
      for (int y = 0; y < patch.height(); ++y)
        for (int x = 0; x < patch.width(); ++x)
          for (int c = 0; c < image.channels(); ++c) {
            double& v = out(patch.row + y, patch.col + x, c);
            v = (1 - alpha) * v + alpha * patch.pattern(y, x, c);
          }
      return out;
    }
    if (!pattern.same_shape(image)) fail(ErrorKind::kGeometry, "blend pattern shape mismatch");
    ImageTensor out = image;
    auto px = out.mutable_pixels();
    auto pp = pattern.pixels();
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = (1 - alpha) * px[i] + alpha * pp[i];
    return out;
  }
};

// Uniform-noise full-image pattern for the blended comparator.
inline ImageTensor blend_pattern(int height, int width, int channels, std::uint64_t seed) {
  ImageTensor p(height, width, channels, 0.0);
  Rng rng(derive_seed(seed, "blend-pattern"));
  for (double& v : p.mutable_pixels()) v = uniform01(rng);
  return p;
}

// The trigger a comparator plants, as applied to queries.
inline AppliedTrigger comparator_trigger(const ComparatorAttackConfig& cfg, const TriggerSpec& trig) {
  if (cfg.method == ComparatorMethod::kBadnetPatch) return AppliedTrigger::from_patch(trig, cfg.strength);
  AppliedTrigger a;
  a.kind = AppliedTrigger::Kind::kFullImage;
  const int c = trig.pattern.empty() ? 3 : trig.pattern.channels();
  a.pattern = blend_pattern(trig.frame_height, trig.frame_width, c, trig.seed);
  a.alpha = cfg.strength;
  return a;
}

// Stamps the trigger on the first poison_count_per_class support images of
// every untargeted class and relabels them to the target (dirty label).
inline PoisonedSupportSet build_comparator_set(const Episode& episode,
                                               const ComparatorAttackConfig& cfg,
                                               const TriggerSpec& trig) {
  if (cfg.poison_count_per_class < 0) {
    fail(ErrorKind::kConfig, "poison_count_per_class must be non-negative");
  }
  if (!(cfg.strength >= 0.0 && cfg.strength <= 1.0)) {
    fail(ErrorKind::kConfig, "comparator strength must lie in [0, 1]");
  }
  const std::string target = cfg.dirty_label_target.empty() ? episode.target_class
                                                            : cfg.dirty_label_target;
  episode.class_position(target);
  std::map<std::string, int> per_class;
  for (const auto& e : episode.support) ++per_class[e.label];
  for (const auto& [label, n] : per_class) {
    if (cfg.poison_count_per_class > n) {
      fail(ErrorKind::kConfig, "poison_count_per_class " +
                                   std::to_string(cfg.poison_count_per_class) + " exceeds the " +
                                   std::to_string(n) + " shots of class '" + label + "'");
    }
  }
  const AppliedTrigger applied = comparator_trigger(cfg, trig);
  PoisonedSupportSet out;
  out.examples = episode.support;
  out.scope = PoisonScope::kUntargetedOnly;
  out.dirty_label = true;
  std::map<std::string, int> taken;
  for (auto& ex : out.examples) {
    if (ex.label == target) continue;
    if (taken[ex.label]++ >= cfg.poison_count_per_class) continue;
    ex.image = applied.apply(ex.image);
    ex.label = target;
    out.provenance[ex.source_id] = to_string(cfg.method);
  }
  return out;
}

// Stealth report ------------------------------------------------------------

struct DiffRow {
  std::string source_id;
  double linf = 0.0;
  double mean_abs = 0.0;
  bool label_changed = false;
};

struct DiffReport {
  std::vector<DiffRow> rows;
  int label_changes = 0;
  int images_changed = 0;
  double max_linf = 0.0;
};

inline DiffReport diff_report(const std::vector<LabeledExample>& clean,
                              const PoisonedSupportSet& poisoned) {
  if (clean.size() != poisoned.examples.size()) {
    fail(ErrorKind::kInput, "clean and poisoned sets differ in size");
  }
  DiffReport r;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const auto& a = clean[i];
    const auto& b = poisoned.examples[i];
    if (a.source_id != b.source_id) {
      fail(ErrorKind::kInput, "sets misaligned at position " + std::to_string(i) + " ('" +
                                  a.source_id + "' vs '" + b.source_id + "')");
    }
    if (!a.image.same_shape(b.image)) {
      fail(ErrorKind::kInput, "image shape differs for '" + a.source_id + "'");
    }
    DiffRow row{a.source_id, linf_distance(a.image, b.image), mean_abs_distance(a.image, b.image),
                a.label != b.label};
    r.label_changes += row.label_changed;
    r.images_changed += row.linf > 0.0;
    r.max_linf = std::max(r.max_linf, row.linf);
    r.rows.push_back(std::move(row));
  }
  return r;
}

// Poisoned-set bundle ---------------------------------------------------------
//
//   FLBA-POISONED-SET
//   version 1
//   scope <scope>
//   epsilon <double>
//   dirty_label <0|1>
//   fingerprint <hex64>
//   examples <n>
//   example <source_id> <label> <tag> <height> <width> <channels>
//   ...
//   payload
//   concatenated pixels

inline constexpr const char* kPoisonedSetMagic = "FLBA-POISONED-SET";

inline std::string serialize_poisoned_set(const PoisonedSupportSet& set,
                                          std::uint64_t fingerprint = 0) {
  artifact::Writer w(kPoisonedSetMagic);
  w.line("version", 1)
      .line("scope", to_string(set.scope))
      .real("epsilon", set.epsilon)
      .line("dirty_label", set.dirty_label ? 1 : 0)
      .line("fingerprint", hex64(fingerprint))
      .line("examples", set.examples.size());
  for (const auto& e : set.examples) {
    auto it = set.provenance.find(e.source_id);
    w.line("example", artifact::escape_token(e.source_id), artifact::escape_token(e.label),
           it == set.provenance.end() ? kTagClean : it->second, e.image.height(), e.image.width(),
           e.image.channels());
  }
  for (const auto& e : set.examples) w.payload(e.image.pixels());
  return w.bytes();
}

inline PoisonedSupportSet parse_poisoned_set(artifact::Reader r, std::uint64_t* fingerprint = nullptr) {
  PoisonedSupportSet set;
  if (r.value<int>("version") != 1) r.bad("unsupported version");
  set.scope = parse_poison_scope(r.value<std::string>("scope"));
  set.epsilon = r.real("epsilon");
  set.dirty_label = r.value<int>("dirty_label") != 0;
  const std::uint64_t fp = r.hex("fingerprint");
  if (fingerprint != nullptr) *fingerprint = fp;
  const auto n = r.value<std::size_t>("examples");
  struct Shape {
    int h, w, c;
  };
  std::vector<Shape> shapes;
  for (std::size_t i = 0; i < n; ++i) {
    auto ls = r.expect("example");
    std::string id, label, tag;
    Shape s{};
    ls >> id >> label >> tag >> s.h >> s.w >> s.c;
    if (ls.fail() || s.h <= 0 || s.w <= 0 || s.c <= 0) r.bad("malformed example line " + std::to_string(i));
    LabeledExample e;
    e.source_id = artifact::unescape_token(id);
    e.label = artifact::unescape_token(label);
    if (tag != kTagClean) set.provenance[e.source_id] = tag;
    set.examples.push_back(std::move(e));
    shapes.push_back(s);
  }
  const std::vector<double> payload = r.payload();
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = static_cast<std::size_t>(shapes[i].h) * shapes[i].w * shapes[i].c;
    if (off + len > payload.size()) r.bad("payload shorter than examples declare");
    try {
      set.examples[i].image = ImageTensor(
          shapes[i].h, shapes[i].w, shapes[i].c,
          std::vector<double>(payload.begin() + off, payload.begin() + off + len));
    } catch (const Error& e) {
      r.bad(std::string("bad pixels for example ") + std::to_string(i) + ": " + e.message());
    }
    off += len;
  }
  if (off != payload.size()) r.bad("payload longer than examples declare");
  return set;
}

inline void save_poisoned_set(const std::filesystem::path& path, const PoisonedSupportSet& set,
                              std::uint64_t fingerprint = 0) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  const std::string bytes = serialize_poisoned_set(set, fingerprint);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline PoisonedSupportSet load_poisoned_set(const std::filesystem::path& path,
                                            std::uint64_t* fingerprint = nullptr) {
  return parse_poisoned_set(artifact::Reader::open(path, kPoisonedSetMagic), fingerprint);
}

}  // namespace flba

#endif  // FLBA_POISON_HPP_
