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

#ifndef FLBA_DATASET_HPP_
#define FLBA_DATASET_HPP_

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "flba/common.hpp"
#include "flba/image.hpp"

namespace flba {

struct LabeledExample {
  ImageTensor image;
  std::string label;
  std::string source_id;

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

enum class SplitRole { kAuxiliary, kSupportPool, kQueryPool, kValidation };

inline const char* to_string(SplitRole role) {
  switch (role) {
    case SplitRole::kAuxiliary: return "auxiliary";
    case SplitRole::kSupportPool: return "support-pool";
    case SplitRole::kQueryPool: return "query-pool";
    case SplitRole::kValidation: return "validation";
  }
  return "?";
}

struct SplitSet {
  SplitRole role = SplitRole::kAuxiliary;
  std::vector<LabeledExample> examples;
  std::vector<std::string> class_set;  // sorted

  std::vector<const LabeledExample*> of_class(const std::string& label) const {
    std::vector<const LabeledExample*> out;
    for (const auto& e : examples) {
      if (e.label == label) out.push_back(&e);
    }
    return out;
  }
};

struct DatasetSplits {
  SplitSet auxiliary;
  SplitSet support_pool;
  SplitSet query_pool;
  SplitSet validation;  // only populated by manifests that name a val split
};

// Checks the per-split and cross-split invariants; throws kInput on failure.
inline void validate(const SplitSet& split) {
  std::set<std::string> ids;
  const std::set<std::string> classes(split.class_set.begin(), split.class_set.end());
  const ImageTensor* first = split.examples.empty() ? nullptr : &split.examples.front().image;
  for (const auto& e : split.examples) {
    if (!ids.insert(e.source_id).second) {
      fail(ErrorKind::kInput, std::string("duplicate source_id '") + e.source_id + "' in " +
                                  to_string(split.role));
    }
    if (!classes.contains(e.label)) {
      fail(ErrorKind::kInput, "label '" + e.label + "' not in class set of " + to_string(split.role));
    }
    if (!e.image.same_shape(*first)) {
      fail(ErrorKind::kInput, "image '" + e.source_id + "' has a different shape");
    }
  }
}

inline void validate(const DatasetSplits& d) {
  validate(d.auxiliary);
  validate(d.support_pool);
  validate(d.query_pool);
  if (d.support_pool.class_set != d.query_pool.class_set) {
    fail(ErrorKind::kInput, "support and query pools must share a class set");
  }
  for (const auto& c : d.auxiliary.class_set) {
    if (std::binary_search(d.support_pool.class_set.begin(), d.support_pool.class_set.end(), c)) {
      fail(ErrorKind::kInput, "auxiliary class '" + c + "' also appears in the novel pools");
    }
  }
}

// Synthetic data -----------------------------------------------------------
//
// Recipe, per class c out of n:
//   foreground  HSV(c / n, 0.85, 0.9), value jittered by +-0.1 per sample
//   background  HSV(c / n + 0.5, 0.25, 0.3), value jittered by +-0.1
//   primitive   c % 5 -> disk, square, triangle, cross, ring; radius
//               uniform in [0.22, 0.34] * resolution, center jittered by
//               up to resolution / 8 in each axis
//   texture     (c / 5) % 2 == 1 adds horizontal stripes (period 4 px,
//               foreground value scaled by 0.6 on odd bands)
//   noise       i.i.d. N(0, 0.04^2) per pixel and channel, then clip
// Novel classes are spread evenly over the class indices so every hue band
// and primitive appears in both the auxiliary and the novel classes.

struct SyntheticSpec {
  int num_classes = 10;
  int per_class = 60;
  int resolution = 32;
  std::uint64_t seed = 0;
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

inline bool inside_primitive(int kind, double dx, double dy, double r) {
  switch (kind) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case 2: return dy <= 0.7 * r && dy >= -r + 2.0 * std::abs(dx) * 0.9;
    case 3: return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) ||
                   (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
    default: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.36 * r * r;
    }
  }
}

inline std::string class_name(int c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "class_%03d", c);
  return buf;
}

}  // namespace detail

inline ImageTensor render_synthetic(int class_index, int num_classes, int resolution, Rng& rng) {
  const double hue = static_cast<double>(class_index) / num_classes;
  const int primitive = class_index % 5;
  const bool striped = (class_index / 5) % 2 == 1;
  double fg[3], bg[3];
  detail::hsv_to_rgb(hue, 0.85, std::clamp(0.9 + uniform(rng, -0.1, 0.1), 0.0, 1.0), fg);
  detail::hsv_to_rgb(hue + 0.5, 0.25, 0.3 + uniform(rng, -0.1, 0.1), bg);
  const double r = resolution * uniform(rng, 0.22, 0.34);
  const double jitter = resolution / 8.0;
  const double cx = (resolution - 1) / 2.0 + uniform(rng, -jitter, jitter);
  const double cy = (resolution - 1) / 2.0 + uniform(rng, -jitter, jitter);
  ImageTensor img(resolution, resolution, 3);
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      const bool in = detail::inside_primitive(primitive, x - cx, y - cy, r);
      const double band = (striped && (y / 2) % 2 == 1) ? 0.6 : 1.0;
      for (int c = 0; c < 3; ++c) {
        const double base = in ? fg[c] * band : bg[c];
        img(y, x, c) = std::clamp(base + normal(rng, 0.0, 0.04), 0.0, 1.0);
      }
    }
  }
  return img;
}

inline std::vector<int> novel_class_indices(int num_classes) {
  const int novel = std::max(5, num_classes - num_classes / 2);
  std::vector<int> out;
  for (int i = 0; i < novel; ++i) {
    out.push_back(static_cast<int>(std::floor((i + 0.5) * num_classes / novel)));
  }
  return out;
}

// Returns (auxiliary, support-pool, query-pool). Novel-class examples are
// split per class: the first floor(per_class / 2) go to the support pool.
inline DatasetSplits generate_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.num_classes < 6) fail(ErrorKind::kConfig, "num_classes must be at least 6");
  if (spec.per_class < 2) fail(ErrorKind::kConfig, "per_class must be at least 2");
  if (spec.resolution < 4) fail(ErrorKind::kConfig, "resolution must be at least 4");

  const std::vector<int> novel = novel_class_indices(spec.num_classes);
  DatasetSplits d;
  d.auxiliary.role = SplitRole::kAuxiliary;
  d.support_pool.role = SplitRole::kSupportPool;
  d.query_pool.role = SplitRole::kQueryPool;
  d.validation.role = SplitRole::kValidation;
  for (int c = 0; c < spec.num_classes; ++c) {
    const std::string name = detail::class_name(c);
    const bool is_novel = std::find(novel.begin(), novel.end(), c) != novel.end();
    Rng rng(derive_seed(spec.seed, "synthetic-class", static_cast<std::uint64_t>(c)));
    if (is_novel) {
      d.support_pool.class_set.push_back(name);
      d.query_pool.class_set.push_back(name);
    } else {
      d.auxiliary.class_set.push_back(name);
    }
    for (int i = 0; i < spec.per_class; ++i) {
      char id[64];
      std::snprintf(id, sizeof id, "%s/%05d", name.c_str(), i);
      LabeledExample e{render_synthetic(c, spec.num_classes, spec.resolution, rng), name, id};
      if (!is_novel) {
        d.auxiliary.examples.push_back(std::move(e));
      } else if (i < spec.per_class / 2) {
        d.support_pool.examples.push_back(std::move(e));
      } else {
        d.query_pool.examples.push_back(std::move(e));
      }
    }
  }
  return d;
}

// Episodes ------------------------------------------------------------------

struct EpisodeSpec {
  int ways = 5;
  int shots = 5;
  int queries_per_class = 15;
  std::uint64_t seed = 0;
  // Position in the shuffled class order used as target; a non-empty
  // target_label takes precedence when it is among the sampled classes.
  int target_index = 0;
  std::string target_label;
};

struct Episode {
  std::vector<LabeledExample> support;
  std::vector<LabeledExample> query;
  std::vector<std::string> class_order;
  std::string target_class;
  std::uint64_t seed = 0;

  int class_position(const std::string& label) const {
    auto it = std::find(class_order.begin(), class_order.end(), label);
    if (it == class_order.end()) fail(ErrorKind::kInput, "label '" + label + "' not in episode");
    return static_cast<int>(it - class_order.begin());
  }
};

inline Episode sample_episode(const SplitSet& support_pool, const SplitSet& query_pool,
                              const EpisodeSpec& spec) {
  if (spec.ways <= 0 || spec.shots <= 0 || spec.queries_per_class <= 0) {
    fail(ErrorKind::kConfig, "ways, shots and queries must be positive");
  }
  if (support_pool.class_set != query_pool.class_set) {
    fail(ErrorKind::kSampling, "support and query pools do not share a class set");
  }
  if (spec.ways > static_cast<int>(support_pool.class_set.size())) {
    fail(ErrorKind::kSampling, std::to_string(spec.ways) + "-way episode needs more than the " +
                                   std::to_string(support_pool.class_set.size()) +
                                   " available classes");
  }
  Rng rng(derive_seed(spec.seed, "episode"));
  std::vector<std::string> classes = support_pool.class_set;
  shuffle(std::span<std::string>(classes), rng);
  classes.resize(spec.ways);

  Episode ep;
  ep.seed = spec.seed;
  ep.class_order = classes;
  if (!spec.target_label.empty() &&
      std::find(classes.begin(), classes.end(), spec.target_label) != classes.end()) {
    ep.target_class = spec.target_label;
  } else {
    if (spec.target_index < 0 || spec.target_index >= spec.ways) {
      fail(ErrorKind::kConfig, "target_index outside [0, ways)");
    }
    ep.target_class = classes[spec.target_index];
  }

  auto draw = [&](const SplitSet& pool, const std::string& label, int count,
                  std::vector<LabeledExample>& out) {
    std::vector<const LabeledExample*> members = pool.of_class(label);
    if (static_cast<int>(members.size()) < count) {
      fail(ErrorKind::kSampling, "class '" + label + "' has " + std::to_string(members.size()) +
                                     " examples in " + to_string(pool.role) + ", need " +
                                     std::to_string(count));
    }
    shuffle(std::span<const LabeledExample*>(members), rng);
    for (int i = 0; i < count; ++i) out.push_back(*members[i]);
  };
  for (const auto& c : classes) draw(support_pool, c, spec.shots, ep.support);
  for (const auto& c : classes) draw(query_pool, c, spec.queries_per_class, ep.query);

  std::set<std::string> ids;
  for (const auto& e : ep.support) ids.insert(e.source_id);
  for (const auto& e : ep.query) {
    if (ids.contains(e.source_id)) {
      fail(ErrorKind::kSampling, "source_id '" + e.source_id + "' in both support and query");
    }
  }
  return ep;
}

inline std::vector<ImageTensor> images_of(const std::vector<LabeledExample>& examples) {
  std::vector<ImageTensor> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(e.image);
  return out;
}

}  // namespace flba

#endif  // FLBA_DATASET_HPP_
