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

#ifndef FLBA_IMAGE_HPP_
#define FLBA_IMAGE_HPP_

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "flba/common.hpp"

namespace flba {

// H x W x C image with unit-interval intensities, stored interleaved
// (channel fastest): pixel (y, x, c) lives at (y * W + x) * C + c.
class ImageTensor {
 public:
  ImageTensor() = default;

  ImageTensor(int height, int width, int channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels) {
    check_dims();
    if (!(fill >= 0.0 && fill <= 1.0)) {
      fail(ErrorKind::kInput, "fill value outside [0,1]");
    }
    pixels_.assign(size(), fill);
  }

  ImageTensor(int height, int width, int channels, std::vector<double> pixels)
      : height_(height), width_(width), channels_(channels), pixels_(std::move(pixels)) {
    check_dims();
    if (pixels_.size() != size()) {
      fail(ErrorKind::kInput, "pixel count " + std::to_string(pixels_.size()) +
                                  " does not match " + std::to_string(height) + "x" +
                                  std::to_string(width) + "x" + std::to_string(channels));
    }
    for (double v : pixels_) {
      if (!(v >= 0.0 && v <= 1.0)) fail(ErrorKind::kInput, "pixel value outside [0,1]");
    }
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  std::size_t size() const noexcept {
    return static_cast<std::size_t>(height_) * width_ * channels_;
  }
  bool empty() const noexcept { return pixels_.empty(); }

  double operator()(int y, int x, int c) const { return pixels_[index(y, x, c)]; }
  double& operator()(int y, int x, int c) { return pixels_[index(y, x, c)]; }

  std::span<const double> pixels() const noexcept { return pixels_; }
  // Writers are responsible for keeping values in [0,1]; see clip().
  std::span<double> mutable_pixels() noexcept { return pixels_; }

  bool same_shape(const ImageTensor& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
  }

  void clip() {
    for (double& v : pixels_) v = std::clamp(v, 0.0, 1.0);
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  void check_dims() const {
    if (height_ <= 0 || width_ <= 0 || channels_ <= 0) {
      fail(ErrorKind::kInput, "image dimensions must be positive");
    }
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> pixels_;
};

inline double linf_distance(const ImageTensor& a, const ImageTensor& b) {
  if (!a.same_shape(b)) fail(ErrorKind::kInput, "image shapes differ");
  double m = 0.0;
  auto pa = a.pixels();
  auto pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) m = std::max(m, std::abs(pa[i] - pb[i]));
  return m;
}

inline double mean_abs_distance(const ImageTensor& a, const ImageTensor& b) {
  if (!a.same_shape(b)) fail(ErrorKind::kInput, "image shapes differ");
  if (a.empty()) return 0.0;
  double s = 0.0;
  auto pa = a.pixels();
  auto pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) s += std::abs(pa[i] - pb[i]);
  return s / static_cast<double>(pa.size());
}

// Bilinear resize with half-pixel centers.
inline ImageTensor resize_bilinear(const ImageTensor& src, int height, int width) {
  if (src.height() == height && src.width() == width) return src;
  ImageTensor out(height, width, src.channels());
  const double sy = static_cast<double>(src.height()) / height;
  const double sx = static_cast<double>(src.width()) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels(); ++c) {
        const double top = src(y0, x0, c) * (1 - wx) + src(y0, x1, c) * wx;
        const double bottom = src(y1, x0, c) * (1 - wx) + src(y1, x1, c) * wx;
        out(y, x, c) = std::clamp(top * (1 - wy) + bottom * wy, 0.0, 1.0);
      }
    }
  }
  return out;
}

}  // namespace flba

#endif  // FLBA_IMAGE_HPP_
