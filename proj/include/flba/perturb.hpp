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

// Hidden-trigger perturbations. For an image x with clean feature z = f(x)
// and poisoned reference r = f(blend(x, t*)), the hidden feature is
// h = f(clip(x + delta)) and
//   attractive: minimize d(h, r) + lambda1 * d(h, z)
//   repulsive:  maximize d(h, r) - lambda2 * d(h, z)
// subject to |delta|_inf <= epsilon, solved by sign-gradient PGD.

#ifndef FLBA_PERTURB_HPP_
#define FLBA_PERTURB_HPP_

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "flba/artifact_io.hpp"
#include "flba/embedding.hpp"
#include "flba/trigger.hpp"

namespace flba {

struct PerturbConfig {
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int iterations = 80;
  double lambda1 = 1.5;
  double lambda2 = 1.5;
  std::uint64_t seed = 0;
};

enum class PerturbationKind { kAttractive, kRepulsive };

inline const char* to_string(PerturbationKind k) {
  return k == PerturbationKind::kAttractive ? "attractive" : "repulsive";
}

struct PerturbationRecord {
  std::string source_id;
  PerturbationKind kind = PerturbationKind::kAttractive;
  PerturbationRecord() = default;
  // Same layout as ImageTensor::pixels().
  std::vector<double> delta;
  // Final (best-iterate) d(h, r) and d(h, z), averaged over models.
  double primary_term = 0.0;
  double regularizer_term = 0.0;
  // d(z, r) before perturbation, averaged over models.
  double clean_primary = 0.0;
  // Set when the hidden feature did not move the intended way relative to
  // the clean feature (attractive: closer to r; repulsive: farther).
  bool distance_warning = false;

  double linf() const {
    double m = 0.0;
    for (double v : delta) m = std::max(m, std::abs(v));
    return m;
  }
};

// clip(image + delta) elementwise.
inline ImageTensor apply_delta(const ImageTensor& image, const std::vector<double>& delta) {
  if (delta.size() != image.size()) {
    fail(ErrorKind::kConstruction, "perturbation size does not match image");
  }
  ImageTensor out = image;
  auto px = out.mutable_pixels();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::clamp(px[i] + delta[i], 0.0, 1.0);
  return out;
}

template <typename S>
FeatureVector poisoned_reference_feature(const EmbeddingModel<S>& model, const ImageTensor& image,
                                         const TriggerSpec& trig) {
  return embed(model, blend(image, trig));
}

namespace detail {

struct PgdTerms {
  double objective = 0.0;  // value that is minimized
  double primary = 0.0;
  double regularizer = 0.0;
};

// Runs PGD jointly for a batch of independent samples. Each sample owns
// its delta and best iterate; the per-sample objective is the mean over
// models of that sample's attractive or repulsive objective.
template <typename S>
std::vector<PerturbationRecord> run_pgd(std::span<const EmbeddingModel<S>> models,
                                        std::span<const ImageTensor> images,
                                        std::span<const TriggerSpec> triggers,
                                        std::span<const PerturbationKind> kinds,
                                        std::span<const std::string> ids, const PerturbConfig& cfg) {
  if (models.empty()) fail(ErrorKind::kConfig, "at least one model is required");
  if (triggers.size() != models.size()) {
    fail(ErrorKind::kConfig, "need exactly one trigger per model (" +
                                 std::to_string(models.size()) + " models, " +
                                 std::to_string(triggers.size()) + " triggers)");
  }
  if (kinds.size() != images.size() || ids.size() != images.size()) {
    fail(ErrorKind::kInput, "kinds and ids must align with images");
  }
  if (!(cfg.epsilon >= 0) || !(cfg.step_size > 0) || cfg.iterations < 0 || !(cfg.lambda1 >= 0) ||
      !(cfg.lambda2 >= 0)) {
    fail(ErrorKind::kConfig, "invalid perturbation configuration");
  }
  const std::size_t n = images.size();
  const std::size_t m = models.size();
  const double inv_m = 1.0 / static_cast<double>(m);

  std::vector<Eigen::MatrixXd> clean(m), ref(m);
  for (std::size_t k = 0; k < m; ++k) {
    clean[k] = embed_batch(models[k], images);
    std::vector<ImageTensor> blended;
    for (const auto& img : images) blended.push_back(blend(img, triggers[k]));
    ref[k] = embed_batch(models[k], std::span<const ImageTensor>(blended));
    for (std::size_t i = 0; i < n; ++i) {
      if (clean[k].col(i).norm() == 0.0 || ref[k].col(i).norm() == 0.0) {
        fail(ErrorKind::kNumericDomain, "zero feature for sample '" + ids[i] + "'");
      }
    }
  }

  std::vector<PerturbationRecord> records(n);
  std::vector<std::vector<double>> delta(n);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    records[i].source_id = ids[i];
    records[i].kind = kinds[i];
    delta[i].assign(images[i].size(), 0.0);
    double cp = 0.0;
    for (std::size_t k = 0; k < m; ++k) cp += cosine_distance(clean[k].col(i), ref[k].col(i));
    records[i].clean_primary = cp * inv_m;
  }

  auto terms_for = [&](std::size_t k, std::size_t i, const FeatureVector& h, FeatureVector* g) {
    const FeatureVector r = ref[k].col(static_cast<Eigen::Index>(i));
    const FeatureVector z = clean[k].col(static_cast<Eigen::Index>(i));
    if (h.norm() == 0.0) fail(ErrorKind::kNumericDomain, "zero hidden feature for '" + ids[i] + "'");
    PgdTerms t;
    t.primary = cosine_distance(h, r);
    t.regularizer = cosine_distance(h, z);
    if (kinds[i] == PerturbationKind::kAttractive) {
      t.objective = t.primary + cfg.lambda1 * t.regularizer;
      if (g != nullptr) *g = cosine_distance_grad(h, r) + cfg.lambda1 * cosine_distance_grad(h, z);
    } else {
      t.objective = -(t.primary - cfg.lambda2 * t.regularizer);
      if (g != nullptr) {
        *g = -(cosine_distance_grad(h, r) - cfg.lambda2 * cosine_distance_grad(h, z));
      }
    }
    return t;
  };

  std::vector<ImageTensor> adv(n);
  for (int it = 0; it <= cfg.iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) adv[i] = apply_delta(images[i], delta[i]);
    const bool last = it == cfg.iterations;
    std::vector<PgdTerms> terms(n);
    std::vector<std::vector<double>> grad(n);
    for (std::size_t k = 0; k < m; ++k) {
      if (last) {
        const Eigen::MatrixXd h = embed_batch(models[k], std::span<const ImageTensor>(adv));
        for (std::size_t i = 0; i < n; ++i) {
          const PgdTerms t = terms_for(k, i, h.col(static_cast<Eigen::Index>(i)), nullptr);
          terms[i].objective += t.objective * inv_m;
          terms[i].primary += t.primary * inv_m;
          terms[i].regularizer += t.regularizer * inv_m;
        }
        continue;
      }
      auto r = input_gradients(models[k], std::span<const ImageTensor>(adv),
                               [&](std::size_t i, const FeatureVector& h, FeatureVector* g) {
                                 const PgdTerms t = terms_for(k, i, h, g);
                                 terms[i].objective += t.objective * inv_m;
                                 terms[i].primary += t.primary * inv_m;
                                 terms[i].regularizer += t.regularizer * inv_m;
                                 return t.objective;
                               });
      for (std::size_t i = 0; i < n; ++i) {
        if (grad[i].empty()) grad[i].assign(r.gradients[i].size(), 0.0);
        for (std::size_t p = 0; p < grad[i].size(); ++p) grad[i][p] += r.gradients[i][p] * inv_m;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (terms[i].objective < best[i]) {
        best[i] = terms[i].objective;
        records[i].delta = delta[i];
        records[i].primary_term = terms[i].primary;
        records[i].regularizer_term = terms[i].regularizer;
      }
    }
    if (last) break;
    // Descend, project onto the epsilon ball, then clip to the pixel range.
    for (std::size_t i = 0; i < n; ++i) {
      auto px = images[i].pixels();
      for (std::size_t p = 0; p < delta[i].size(); ++p) {
        const double s = (grad[i][p] > 0) - (grad[i][p] < 0);
        double d = std::clamp(delta[i][p] - cfg.step_size * s, -cfg.epsilon, cfg.epsilon);
        if (px[p] + d > 1.0) d = 1.0 - px[p];
        if (px[p] + d < 0.0) d = -px[p];
        delta[i][p] = d;
      }
    }
  }
  for (auto& rec : records) {
    rec.distance_warning = rec.kind == PerturbationKind::kAttractive
                               ? rec.primary_term > rec.clean_primary
                               : rec.primary_term < rec.clean_primary;
  }
  return records;
}

}  // namespace detail

// Optimizes one perturbation per image in a single batched PGD run; each
// image's result is independent of the others.
template <typename S>
std::vector<PerturbationRecord> optimize_perturbations(const EmbeddingModel<S>& model,
                                                       std::span<const ImageTensor> images,
                                                       std::span<const std::string> ids,
                                                       std::span<const PerturbationKind> kinds,
                                                       const TriggerSpec& trig,
                                                       const PerturbConfig& cfg) {
  return detail::run_pgd(std::span<const EmbeddingModel<S>>(&model, 1), images,
                         std::span<const TriggerSpec>(&trig, 1), kinds, ids, cfg);
}

template <typename S>
PerturbationRecord optimize_attractive(const EmbeddingModel<S>& model, const ImageTensor& image,
                                       const TriggerSpec& trig, const PerturbConfig& cfg,
                                       const std::string& source_id = {}) {
  const PerturbationKind kind = PerturbationKind::kAttractive;
  return optimize_perturbations(model, std::span<const ImageTensor>(&image, 1),
                                std::span<const std::string>(&source_id, 1),
                                std::span<const PerturbationKind>(&kind, 1), trig, cfg)
      .front();
}

template <typename S>
PerturbationRecord optimize_repulsive(const EmbeddingModel<S>& model, const ImageTensor& image,
                                      const TriggerSpec& trig, const PerturbConfig& cfg,
                                      const std::string& source_id = {}) {
  const PerturbationKind kind = PerturbationKind::kRepulsive;
  return optimize_perturbations(model, std::span<const ImageTensor>(&image, 1),
                                std::span<const std::string>(&source_id, 1),
                                std::span<const PerturbationKind>(&kind, 1), trig, cfg)
      .front();
}

// Mean of the per-model objectives, one trigger per model.
template <typename S>
PerturbationRecord optimize_ensemble(std::span<const EmbeddingModel<S>> models,
                                     const ImageTensor& image,
                                     std::span<const TriggerSpec> trig_per_model,
                                     PerturbationKind kind, const PerturbConfig& cfg,
                                     const std::string& source_id = {}) {
  if (models.size() < 2) fail(ErrorKind::kConfig, "ensemble optimization needs at least 2 models");
  return detail::run_pgd(models, std::span<const ImageTensor>(&image, 1), trig_per_model,
                         std::span<const PerturbationKind>(&kind, 1),
                         std::span<const std::string>(&source_id, 1), cfg)
      .front();
}

// Perturbation bundle ----------------------------------------------------------
//
//   FLBA-PERTURBATIONS
//   version 1
//   epsilon / step_size / lambda1 / lambda2 <double>
//   iterations <int>
//   seed <uint64>
//   fingerprint <hex64>
//   counts <attractive> <repulsive>
//   records <n>
//   record <source_id> <kind> <flags> <length> <primary> <regularizer> <clean_primary>
//   ...
//   payload
//   concatenated deltas

inline constexpr const char* kPerturbationMagic = "FLBA-PERTURBATIONS";

struct PerturbationBundle {
  PerturbConfig config;
  std::uint64_t fingerprint = 0;
  std::vector<PerturbationRecord> records;
};

inline std::string serialize_perturbations(const PerturbationBundle& b) {
  artifact::Writer w(kPerturbationMagic);
  std::size_t attractive = 0;
  for (const auto& r : b.records) attractive += r.kind == PerturbationKind::kAttractive;
  w.line("version", 1)
      .real("epsilon", b.config.epsilon)
      .real("step_size", b.config.step_size)
      .real("lambda1", b.config.lambda1)
      .real("lambda2", b.config.lambda2)
      .line("iterations", b.config.iterations)
      .line("seed", b.config.seed)
      .line("fingerprint", hex64(b.fingerprint))
      .line("counts", attractive, b.records.size() - attractive)
      .line("records", b.records.size());
  for (const auto& r : b.records) {
    w.line("record", artifact::escape_token(r.source_id), to_string(r.kind),
           r.distance_warning ? "warn" : "ok", r.delta.size(),
           detail::format_double(r.primary_term), detail::format_double(r.regularizer_term),
           detail::format_double(r.clean_primary));
  }
  for (const auto& r : b.records) w.payload(r.delta);
  return w.bytes();
}

inline PerturbationBundle parse_perturbations(artifact::Reader r) {
  PerturbationBundle b;
  if (r.value<int>("version") != 1) r.bad("unsupported version");
  b.config.epsilon = r.real("epsilon");
  b.config.step_size = r.real("step_size");
  b.config.lambda1 = r.real("lambda1");
  b.config.lambda2 = r.real("lambda2");
  b.config.iterations = r.value<int>("iterations");
  b.config.seed = r.value<std::uint64_t>("seed");
  b.fingerprint = r.hex("fingerprint");
  std::size_t na = 0, nr = 0;
  {
    auto ls = r.expect("counts");
    ls >> na >> nr;
    if (ls.fail()) r.bad("malformed counts");
  }
  const auto count = r.value<std::size_t>("records");
  if (count != na + nr) r.bad("record count does not match kind counts");
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < count; ++i) {
    auto ls = r.expect("record");
    std::string id, kind, flags, primary, reg, cp;
    std::size_t len = 0;
    ls >> id >> kind >> flags >> len >> primary >> reg >> cp;
    if (ls.fail()) r.bad("malformed record line " + std::to_string(i));
    PerturbationRecord rec;
    rec.source_id = artifact::unescape_token(id);
    if (kind == "attractive") {
      rec.kind = PerturbationKind::kAttractive;
    } else if (kind == "repulsive") {
      rec.kind = PerturbationKind::kRepulsive;
    } else {
      r.bad("unknown perturbation kind '" + kind + "'");
    }
    rec.distance_warning = flags == "warn";
    rec.primary_term = std::stod(primary);
    rec.regularizer_term = std::stod(reg);
    rec.clean_primary = std::stod(cp);
    lengths.push_back(len);
    b.records.push_back(std::move(rec));
  }
  const std::vector<double> payload = r.payload();
  std::size_t off = 0;
  for (std::size_t i = 0; i < count; ++i) {
    if (off + lengths[i] > payload.size()) r.bad("payload shorter than records declare");
    b.records[i].delta.assign(payload.begin() + off, payload.begin() + off + lengths[i]);
    off += lengths[i];
  }
  if (off != payload.size()) r.bad("payload longer than records declare");
  return b;
}

inline void save_perturbations(const std::filesystem::path& path, const PerturbationBundle& b) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  const std::string bytes = serialize_perturbations(b);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline PerturbationBundle load_perturbations(const std::filesystem::path& path) {
  return parse_perturbations(artifact::Reader::open(path, kPerturbationMagic));
}

}  // namespace flba

#endif  // FLBA_PERTURB_HPP_
