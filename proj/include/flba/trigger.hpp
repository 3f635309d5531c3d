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

#ifndef FLBA_TRIGGER_HPP_
#define FLBA_TRIGGER_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "flba/artifact_io.hpp"
#include "flba/embedding.hpp"
#include "flba/image.hpp"

namespace flba {

// Rectangular patch trigger. The mask is implied: ones exactly on the
// pattern's rectangle anchored at (row, col) inside a frame_height x
// frame_width image. An empty pattern is the all-zeros mask.
struct TriggerSpec {
  ImageTensor pattern;
  int row = 0;
  int col = 0;
  int frame_height = 0;
  int frame_width = 0;
  std::uint64_t seed = 0;

  int height() const { return pattern.empty() ? 0 : pattern.height(); }
  int width() const { return pattern.empty() ? 0 : pattern.width(); }

  bool covers(int y, int x) const {
    return y >= row && y < row + height() && x >= col && x < col + width();
  }

  // Row-major frame_height x frame_width binary mask.
  std::vector<std::uint8_t> mask() const {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(frame_height) * frame_width, 0);
    for (int y = 0; y < frame_height; ++y)
      for (int x = 0; x < frame_width; ++x) m[std::size_t(y) * frame_width + x] = covers(y, x);
    return m;
  }

  friend bool operator==(const TriggerSpec&, const TriggerSpec&) = default;
};

enum class Placement { kBottomRight, kTopLeft, kCenter, kCustom };
enum class TriggerInit { kUniformRandom, kMidGray };

// Builds a height x width trigger for images of the given frame.
inline TriggerSpec make_trigger(int frame_height, int frame_width, int channels, int height,
                                int width, Placement placement, TriggerInit init,
                                std::uint64_t seed, int row = 0, int col = 0) {
  if (height < 0 || width < 0) fail(ErrorKind::kGeometry, "trigger size must be non-negative");
  TriggerSpec t;
  t.frame_height = frame_height;
  t.frame_width = frame_width;
  t.seed = seed;
  switch (placement) {
    case Placement::kBottomRight:
      t.row = frame_height - height;
      t.col = frame_width - width;
      break;
    case Placement::kTopLeft:
      t.row = 0;
      t.col = 0;
      break;
    case Placement::kCenter:
      t.row = (frame_height - height) / 2;
      t.col = (frame_width - width) / 2;
      break;
    case Placement::kCustom:
      t.row = row;
      t.col = col;
      break;
  }
  if (t.row < 0 || t.col < 0 || t.row + height > frame_height || t.col + width > frame_width) {
    fail(ErrorKind::kGeometry, "trigger of " + std::to_string(height) + "x" +
                                   std::to_string(width) + " at (" + std::to_string(t.row) + "," +
                                   std::to_string(t.col) + ") leaves the " +
                                   std::to_string(frame_height) + "x" +
                                   std::to_string(frame_width) + " frame");
  }
  if (height == 0 || width == 0) return t;
  t.pattern = ImageTensor(height, width, channels, 0.5);
  if (init == TriggerInit::kUniformRandom) {
    Rng rng(derive_seed(seed, "trigger-init"));
    for (double& v : t.pattern.mutable_pixels()) v = uniform01(rng);
  }
  return t;
}

// Side of a square trigger that covers the same fraction of the image side
// as a 16-pixel trigger on an 84-pixel image.
inline int scaled_trigger_size(int resolution, int reference_size = 16, int reference_res = 84) {
  return std::max(1, static_cast<int>(std::lround(static_cast<double>(reference_size) *
                                                  resolution / reference_res)));
}

inline void check_trigger_fits(const ImageTensor& image, const TriggerSpec& trig) {
  if (trig.frame_height != image.height() || trig.frame_width != image.width()) {
    fail(ErrorKind::kGeometry, "trigger frame " + std::to_string(trig.frame_height) + "x" +
                                   std::to_string(trig.frame_width) + " does not match image " +
                                   std::to_string(image.height()) + "x" +
                                   std::to_string(image.width()));
  }
  if (trig.pattern.empty()) return;
  if (trig.pattern.channels() != image.channels()) {
    fail(ErrorKind::kGeometry, "trigger and image channel counts differ");
  }
  if (trig.row < 0 || trig.col < 0 || trig.row + trig.height() > image.height() ||
      trig.col + trig.width() > image.width()) {
    fail(ErrorKind::kGeometry, "trigger patch out of image bounds");
  }
}

// x * (1 - m) + m * t.
inline ImageTensor blend(const ImageTensor& image, const TriggerSpec& trig) {
  check_trigger_fits(image, trig);
  ImageTensor out = image;
  for (int y = 0; y < trig.height(); ++y)
    for (int x = 0; x < trig.width(); ++x)
      for (int c = 0; c < image.channels(); ++c)
        out(trig.row + y, trig.col + x, c) = trig.pattern(y, x, c);
  return out;
}

struct TriggerOptConfig {
  double step_size = 2.0 / 255.0;
  int iterations = 100;
  TriggerInit init_mode = TriggerInit::kUniformRandom;
  std::uint64_t seed = 0;
};

struct TriggerResult {
  TriggerSpec trigger;
  // trace[0] is the initial objective, trace[k] the objective after k steps.
  std::vector<double> trace;
  double objective = 0.0;
  int best_iteration = 0;
};

// Summed embedding deviation sum_i d(f(x_i), f(blend(x_i, t))).
template <typename S>
double embedding_deviation(const EmbeddingModel<S>& model, std::span<const ImageTensor> images,
                           const TriggerSpec& trig) {
  const Eigen::MatrixXd clean = embed_batch(model, images);
  std::vector<ImageTensor> blended;
  blended.reserve(images.size());
  for (const auto& img : images) blended.push_back(blend(img, trig));
  const Eigen::MatrixXd poisoned = embed_batch(model, std::span<const ImageTensor>(blended));
  double total = 0.0;
  for (Eigen::Index i = 0; i < clean.cols(); ++i) {
    total += cosine_distance(clean.col(i), poisoned.col(i));
  }
  return total;
}

// Sign-gradient ascent on the summed embedding deviation with respect to
// the pattern, clipping to [0,1] after every step; returns the best iterate.
template <typename S>
TriggerResult optimize_trigger(const EmbeddingModel<S>& model, std::span<const ImageTensor> images,
                               const TriggerSpec& init, const TriggerOptConfig& cfg) {
  if (images.empty()) fail(ErrorKind::kInput, "trigger optimization needs at least one image");
  if (!(cfg.step_size > 0) || cfg.iterations < 0) {
    fail(ErrorKind::kConfig, "trigger step_size must be positive and iterations non-negative");
  }
  for (const auto& img : images) check_trigger_fits(img, init);

  const Eigen::MatrixXd clean = embed_batch(model, images);
  for (Eigen::Index i = 0; i < clean.cols(); ++i) {
    if (clean.col(i).norm() == 0.0) {
      fail(ErrorKind::kNumericDomain, "image " + std::to_string(i) + " has a zero clean feature");
    }
  }

  TriggerResult result;
  result.trigger = init;
  TriggerSpec current = init;
  std::vector<ImageTensor> blended(images.size());
  const int channels = images.front().channels();
  double best = -std::numeric_limits<double>::infinity();

  for (int it = 0; it <= cfg.iterations; ++it) {
    for (std::size_t i = 0; i < images.size(); ++i) blended[i] = blend(images[i], current);
    const bool last = it == cfg.iterations;
    double objective = 0.0;
    std::vector<double> step_dir;
    if (last) {
      const Eigen::MatrixXd p = embed_batch(model, std::span<const ImageTensor>(blended));
      for (Eigen::Index i = 0; i < p.cols(); ++i) {
        if (p.col(i).norm() == 0.0) {
          fail(ErrorKind::kNumericDomain, "image " + std::to_string(i) + " has a zero triggered feature");
        }
        objective += cosine_distance(clean.col(i), p.col(i));
      }
    } else {
      auto grads = input_gradients(
          model, std::span<const ImageTensor>(blended),
          [&](std::size_t i, const FeatureVector& f, FeatureVector* g) {
            if (f.norm() == 0.0) {
              fail(ErrorKind::kNumericDomain,
                   "image " + std::to_string(i) + " has a zero triggered feature");
            }
            const FeatureVector z = clean.col(static_cast<Eigen::Index>(i));
            *g = cosine_distance_grad(f, z);
            return cosine_distance(z, f);
          });
      for (double l : grads.losses) objective += l;
      // Sum the pixel gradients over the patch.
      step_dir.assign(current.pattern.size(), 0.0);
      for (const auto& g : grads.gradients) {
        for (int y = 0; y < current.height(); ++y)
          for (int x = 0; x < current.width(); ++x)
            for (int c = 0; c < channels; ++c) {
              const std::size_t src =
                  (static_cast<std::size_t>(current.row + y) * current.frame_width +
                   current.col + x) * channels + c;
              step_dir[(static_cast<std::size_t>(y) * current.width() + x) * channels + c] +=
                  g[src];
            }
      }
    }
    result.trace.push_back(objective);
    if (objective > best) {
      best = objective;
      result.trigger = current;
      result.best_iteration = it;
    }
    if (last) break;
    auto px = current.pattern.mutable_pixels();
    for (std::size_t k = 0; k < px.size(); ++k) {
      const double s = (step_dir[k] > 0) - (step_dir[k] < 0);
      px[k] = std::clamp(px[k] + cfg.step_size * s, 0.0, 1.0);
    }
  }
  result.objective = best;
  return result;
}

// Trigger file ---------------------------------------------------------------

inline constexpr const char* kTriggerMagic = "FLBA-TRIGGER";

inline std::string serialize_trigger(const TriggerSpec& t, double objective,
                                     std::uint64_t fingerprint = 0) {
  artifact::Writer w(kTriggerMagic);
  w.line("version", 1)
      .line("frame", t.frame_height, t.frame_width, t.pattern.empty() ? 0 : t.pattern.channels())
      .line("size", t.height(), t.width())
      .line("placement", t.row, t.col)
      .line("seed", t.seed)
      .real("objective", objective)
      .line("fingerprint", hex64(fingerprint));
  w.payload(t.pattern.pixels());
  return w.bytes();
}

struct LoadedTrigger {
  TriggerSpec trigger;
  double objective = 0.0;
  std::uint64_t fingerprint = 0;
};

inline LoadedTrigger parse_trigger(artifact::Reader r) {
  LoadedTrigger out;
  if (r.value<int>("version") != 1) r.bad("unsupported trigger version");
  int channels = 0, h = 0, w = 0;
  {
    auto ls = r.expect("frame");
    ls >> out.trigger.frame_height >> out.trigger.frame_width >> channels;
    if (ls.fail()) r.bad("malformed frame");
  }
  {
    auto ls = r.expect("size");
    ls >> h >> w;
    if (ls.fail()) r.bad("malformed size");
  }
  {
    auto ls = r.expect("placement");
    ls >> out.trigger.row >> out.trigger.col;
    if (ls.fail()) r.bad("malformed placement");
  }
  out.trigger.seed = r.value<std::uint64_t>("seed");
  out.objective = r.real("objective");
  out.fingerprint = r.hex("fingerprint");
  std::vector<double> px = r.payload();
  if (h > 0 && w > 0) {
    if (px.size() != static_cast<std::size_t>(h) * w * channels) r.bad("payload size mismatch");
    out.trigger.pattern = ImageTensor(h, w, channels, std::move(px));
  } else if (!px.empty()) {
    r.bad("payload present for an empty trigger");
  }
  return out;
}

inline void save_trigger(const std::filesystem::path& path, const TriggerSpec& t, double objective,
                         std::uint64_t fingerprint = 0) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  const std::string b = serialize_trigger(t, objective, fingerprint);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

inline LoadedTrigger load_trigger(const std::filesystem::path& path) {
  return parse_trigger(artifact::Reader::open(path, kTriggerMagic));
}

}  // namespace flba

#endif  // FLBA_TRIGGER_HPP_
