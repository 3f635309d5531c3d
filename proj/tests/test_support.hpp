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

// Shared fixtures and brute-force oracles for the unit and acceptance tests.

#ifndef FLBA_TESTS_TEST_SUPPORT_HPP_
#define FLBA_TESTS_TEST_SUPPORT_HPP_

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <unistd.h>

#include "flba/flba.hpp"

namespace flba::testing {

inline ImageTensor random_image(int h, int w, int c, Rng& rng, double lo = 0.0, double hi = 1.0) {
  ImageTensor img(h, w, c);
  for (double& v : img.mutable_pixels()) v = uniform(rng, lo, hi);
  return img;
}

inline nn::Architecture small_conv(int res = 8, std::vector<int> widths = {4, 6}) {
  nn::Architecture a;
  a.name = "conv";
  a.input = {3, res, res};
  a.widths = std::move(widths);
  return a;
}

inline nn::Architecture identity_arch(int h, int w, int c) {
  nn::Architecture a;
  a.name = "identity";
  a.input = {c, h, w};
  a.widths.clear();
  return a;
}

template <typename S = double>
EmbeddingModel<S> frozen_identity(int h, int w, int c) {
  auto m = EmbeddingModel<S>::create(identity_arch(h, w, c), 0);
  m.freeze();
  return m;
}

// A randomly initialized small conv embedding, frozen.
template <typename S = double>
EmbeddingModel<S> random_conv(std::uint64_t seed, int res = 8) {
  auto m = EmbeddingModel<S>::create(small_conv(res), seed);
  m.freeze();
  return m;
}

inline DatasetSplits tiny_dataset(std::uint64_t seed = 1, int per_class = 16, int resolution = 8) {
  SyntheticSpec s;
  s.num_classes = 10;
  s.per_class = per_class;
  s.resolution = resolution;
  s.seed = seed;
  return generate_synthetic_dataset(s);
}

inline Episode tiny_episode(const DatasetSplits& d, std::uint64_t seed, int shots = 2, int queries = 3) {
  EpisodeSpec spec;
  spec.ways = 5;
  spec.shots = shots;
  spec.queries_per_class = queries;
  spec.seed = seed;
  return sample_episode(d.support_pool, d.query_pool, spec);
}

inline double relative_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-7});
  return std::abs(a - b) / scale;
}

// Fraction of pixel coordinates whose analytic input gradient agrees with a
// central finite difference to within `tol` relative error.
template <typename S>
double gradient_agreement(const EmbeddingModel<S>& model, const FeatureLoss& loss,
                          const ImageTensor& image, double h = 1e-6, double tol = 1e-4) {
  const PixelGradient g = grad_wrt_input(model, loss, image);
  auto value = [&](const ImageTensor& img) { return loss(embed(model, img), nullptr); };
  int ok = 0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    // Pixels are nudged without the [0,1] check; the network accepts any value.
    ImageTensor plus = image, minus = image;
    plus.mutable_pixels()[i] += h;
    minus.mutable_pixels()[i] -= h;
    const double fd = (value(plus) - value(minus)) / (2 * h);
    ok += relative_error(g[i], fd) <= tol;
  }
  return static_cast<double>(ok) / static_cast<double>(image.size());
}

// Loss d(f, target) for the finite-difference checks.
inline FeatureLoss cosine_to(const FeatureVector& target) {
  return [target](const FeatureVector& f, FeatureVector* g) {
    if (g != nullptr) *g = cosine_distance_grad(f, target);
    return cosine_distance(f, target);
  };
}

// Grid oracles on identity-architecture instances --------------------------------
//
// Every value in [0,1] that is a multiple of 1/255 is a grid point. The
// "one grid step" tolerance is the largest objective change between the
// grid optimum and any of its grid neighbours.

inline constexpr double kGridStep = 1.0 / 255.0;

struct GridOptimum {
  std::vector<double> point;
  double value = 0.0;
  double step_tolerance = 0.0;
};

// Exhaustive search over a box of grid points. `lo`/`hi` are integer grid
// indices per coordinate; `sense` is +1 to maximize, -1 to minimize.
template <typename F>
GridOptimum grid_search(const std::vector<int>& lo, const std::vector<int>& hi, double sense, F&& f) {
  const std::size_t dims = lo.size();
  std::vector<int> idx = lo;
  GridOptimum best;
  best.value = -sense * std::numeric_limits<double>::infinity();
  std::vector<int> best_idx;
  auto to_point = [&](const std::vector<int>& k) {
    std::vector<double> p(dims);
    for (std::size_t d = 0; d < dims; ++d) p[d] = k[d] * kGridStep;
    return p;
  };
  while (true) {
    const double v = f(to_point(idx));
    if (sense * v > sense * best.value) {
      best.value = v;
      best_idx = idx;
    }
    std::size_t d = 0;
    for (; d < dims; ++d) {
      if (++idx[d] <= hi[d]) break;
      idx[d] = lo[d];
    }
    if (d == dims) break;
  }
  best.point = to_point(best_idx);
  // Neighbours differing by one step in any subset of coordinates.
  for (int mask = 1; mask < static_cast<int>(std::pow(3, dims)); ++mask) {
    std::vector<int> k = best_idx;
    int m = mask;
    bool inside = true;
    for (std::size_t d = 0; d < dims; ++d, m /= 3) {
      k[d] += (m % 3) - 1;
      inside = inside && k[d] >= lo[d] && k[d] <= hi[d];
    }
    if (inside) best.step_tolerance = std::max(best.step_tolerance, std::abs(f(to_point(k)) - best.value));
  }
  return best;
}

inline int grid_index(double v) { return static_cast<int>(std::lround(v * 255.0)); }

// A grayscale 1 x n image with the given pixels.
inline ImageTensor row_image(const std::vector<double>& px) {
  return ImageTensor(1, static_cast<int>(px.size()), 1, px);
}

// Cosine distance between raw pixel vectors (the identity embedding).
inline double pixel_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  FeatureVector x(static_cast<Eigen::Index>(a.size())), y(static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    x[i] = a[i];
    y[i] = b[i];
  }
  return cosine_distance(x, y);
}

// Brute-force nearest prototype: cosine distance written out by hand,
// ties to the lowest index.
inline int brute_nearest(const Eigen::MatrixXd& prototypes, const Eigen::VectorXd& f) {
  int best = -1;
  double best_d = 0.0;
  for (Eigen::Index c = 0; c < prototypes.cols(); ++c) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (Eigen::Index i = 0; i < f.size(); ++i) {
      dot += f[i] * prototypes(i, c);
      na += f[i] * f[i];
      nb += prototypes(i, c) * prototypes(i, c);
    }
    const double d = 1.0 - dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
    if (best < 0 || d < best_d) {
      best = static_cast<int>(c);
      best_d = d;
    }
  }
  return best;
}

// Exact nearest prototype for integer features: cosines are compared as
// a.b / sqrt(|b|^2) without rounding, ties to the lowest index. Prototypes
// may be class sums, since only their direction matters.
inline int exact_nearest(const std::vector<std::vector<long long>>& prototypes,
                         const std::vector<long long>& f) {
  auto dot = [](const std::vector<long long>& a, const std::vector<long long>& b) {
    long long s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  // Sign of da / sqrt(na) - db / sqrt(nb).
  auto compare = [](long long da, long long na, long long db, long long nb) {
    if ((da >= 0) != (db >= 0)) return da >= 0 ? 1 : -1;
    const __int128 l = static_cast<__int128>(da) * da * nb;
    const __int128 r = static_cast<__int128>(db) * db * na;
    const int mag = l > r ? 1 : (l < r ? -1 : 0);
    return da >= 0 ? mag : -mag;
  };
  int best = 0;
  for (std::size_t c = 1; c < prototypes.size(); ++c) {
    const auto& p = prototypes[c];
    const auto& q = prototypes[best];
    if (compare(dot(f, p), dot(p, p), dot(f, q), dot(q, q)) > 0) best = static_cast<int>(c);
  }
  return best;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("flba-test-" + tag + "-" + hex64(splitmix64(reinterpret_cast<std::uintptr_t>(this) ^
                                                         static_cast<std::uint64_t>(::getpid()))));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace flba::testing

#endif  // FLBA_TESTS_TEST_SUPPORT_HPP_
