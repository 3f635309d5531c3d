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

#ifndef FLBA_NN_LAYERS_HPP_
#define FLBA_NN_LAYERS_HPP_

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flba/common.hpp"

namespace flba::nn {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct Shape {
  int channels = 1;
  int height = 1;
  int width = 1;

  int size() const { return channels * height * width; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

// A batch of feature maps. One row per channel, one column per
// (sample, y, x) position, sample-major then row-major. A single sample's
// block is therefore the interleaved HWC layout of ImageTensor.
template <typename S>
struct Batch {
  Matrix<S> data;
  int samples = 0;
  int height = 1;
  int width = 1;

  int channels() const { return static_cast<int>(data.rows()); }
  Shape shape() const { return {channels(), height, width}; }
};

// Per-call state saved by forward() for backward(). Layers are immutable
// so concurrent passes only need separate caches.
template <typename S>
struct LayerCache {
  Matrix<S> saved;
  Matrix<S> extra;
  std::vector<int> index;
  int in_samples = 0;
  int in_height = 0;
  int in_width = 0;
  std::vector<LayerCache> children;
};

template <typename S>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string name() const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Eigen::Index parameter_count() const { return 0; }
  virtual void initialize(std::span<S> /*params*/, Rng& /*rng*/) const {}

  // cache == nullptr runs in inference mode.
  virtual Batch<S> forward(std::span<const S> params, const Batch<S>& in,
                           LayerCache<S>* cache) const = 0;

  // An empty grad_params span skips the parameter gradient.
  virtual Batch<S> backward(std::span<const S> params, const LayerCache<S>& cache,
                            const Batch<S>& grad_out, std::span<S> grad_params) const = 0;
};

template <typename S>
using LayerPtr = std::shared_ptr<const Layer<S>>;

// Square-kernel convolution, stride 1, "same" zero padding (odd kernels).
// Weights are Cout x (k*k*Cin) with column index (ky*k + kx)*Cin + c,
// followed by Cout biases.
template <typename S>
class Conv2d final : public Layer<S> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel)
      : in_(in_channels), out_(out_channels), k_(kernel) {
    if (kernel % 2 == 0 || kernel <= 0) fail(ErrorKind::kConfig, "conv kernel must be odd");
  }

  std::string name() const override {
    return "conv" + std::to_string(k_) + "x" + std::to_string(k_);
  }
  Shape output_shape(const Shape& in) const override { return {out_, in.height, in.width}; }
  Eigen::Index parameter_count() const override { return Eigen::Index(out_) * (patch() + 1); }

  void initialize(std::span<S> params, Rng& rng) const override {
    const double stddev = std::sqrt(2.0 / patch());
    const Eigen::Index nw = Eigen::Index(out_) * patch();
    for (Eigen::Index i = 0; i < nw; ++i) params[i] = static_cast<S>(normal(rng, 0.0, stddev));
    for (std::size_t i = nw; i < params.size(); ++i) params[i] = S(0);
  }

  Batch<S> forward(std::span<const S> params, const Batch<S>& in,
                   LayerCache<S>* cache) const override {
    check_input(in);
    Matrix<S> cols = im2col(in);
    Batch<S> out;
    out.samples = in.samples;
    out.height = in.height;
    out.width = in.width;
    out.data.noalias() = weights(params) * cols;
    out.data.colwise() += bias(params);
    if (cache != nullptr) {
      cache->saved = std::move(cols);
      cache->in_samples = in.samples;
      cache->in_height = in.height;
      cache->in_width = in.width;
    }
    return out;
  }

  Batch<S> backward(std::span<const S> params, const LayerCache<S>& cache,
                    const Batch<S>& grad_out, std::span<S> grad_params) const override {
    if (!grad_params.empty()) {
      Eigen::Map<Matrix<S>> gw(grad_params.data(), out_, patch());
      Eigen::Map<Vector<S>> gb(grad_params.data() + Eigen::Index(out_) * patch(), out_);
      gw.noalias() += grad_out.data * cache.saved.transpose();
      gb.noalias() += grad_out.data.rowwise().sum();
    }
    Matrix<S> grad_cols = weights(params).transpose() * grad_out.data;
    return col2im(grad_cols, cache.in_samples, cache.in_height, cache.in_width);
  }

 private:
  int patch() const { return k_ * k_ * in_; }

  Eigen::Map<const Matrix<S>> weights(std::span<const S> params) const {
    return Eigen::Map<const Matrix<S>>(params.data(), out_, patch());
  }
  Eigen::Map<const Vector<S>> bias(std::span<const S> params) const {
    return Eigen::Map<const Vector<S>>(params.data() + Eigen::Index(out_) * patch(), out_);
  }

  void check_input(const Batch<S>& in) const {
    if (in.channels() != in_) {
      fail(ErrorKind::kInput, name() + " expects " + std::to_string(in_) + " channels, got " +
                                  std::to_string(in.channels()));
    }
  }

  Matrix<S> im2col(const Batch<S>& in) const {
    const int h = in.height, w = in.width, pad = k_ / 2;
    const Eigen::Index positions = Eigen::Index(in.samples) * h * w;
    Matrix<S> cols(patch(), positions);
    S* dst = cols.data();
    const S* src = in.data.data();
    for (int n = 0; n < in.samples; ++n) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          for (int ky = 0; ky < k_; ++ky) {
            const int sy = y + ky - pad;
            for (int kx = 0; kx < k_; ++kx) {
              const int sx = x + kx - pad;
              if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
                std::memset(dst, 0, sizeof(S) * in_);
              } else {
                const std::size_t pos = (std::size_t(n) * h + sy) * w + sx;
                std::memcpy(dst, src + pos * in_, sizeof(S) * in_);
              }
              dst += in_;
            }
          }
        }
      }
    }
    return cols;
  }

  Batch<S> col2im(const Matrix<S>& cols, int samples, int h, int w) const {
    const int pad = k_ / 2;
    Batch<S> out;
    out.samples = samples;
    out.height = h;
    out.width = w;
    out.data = Matrix<S>::Zero(in_, Eigen::Index(samples) * h * w);
    const S* src = cols.data();
    S* dst = out.data.data();
    for (int n = 0; n < samples; ++n) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          for (int ky = 0; ky < k_; ++ky) {
            const int sy = y + ky - pad;
            for (int kx = 0; kx < k_; ++kx) {
              const int sx = x + kx - pad;
              if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
                S* d = dst + ((std::size_t(n) * h + sy) * w + sx) * in_;
                for (int c = 0; c < in_; ++c) d[c] += src[c];
              }
              src += in_;
            }
          }
        }
      }
    }
    return out;
  }

  int in_;
  int out_;
  int k_;
};

template <typename S>
class Relu final : public Layer<S> {
 public:
  std::string name() const override { return "relu"; }
  Shape output_shape(const Shape& in) const override { return in; }

  Batch<S> forward(std::span<const S>, const Batch<S>& in, LayerCache<S>* cache) const override {
    Batch<S> out = in;
    out.data = in.data.cwiseMax(S(0));
    if (cache != nullptr) cache->saved = in.data;
    return out;
  }

  Batch<S> backward(std::span<const S>, const LayerCache<S>& cache, const Batch<S>& grad_out,
                    std::span<S>) const override {
    Batch<S> g = grad_out;
    g.data = (cache.saved.array() > S(0)).select(grad_out.data, S(0));
    return g;
  }
};

// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
template <typename S>
class MaxPool2 final : public Layer<S> {
 public:
  std::string name() const override { return "maxpool2"; }
  Shape output_shape(const Shape& in) const override {
    return {in.channels, in.height / 2, in.width / 2};
  }

  Batch<S> forward(std::span<const S>, const Batch<S>& in, LayerCache<S>* cache) const override {
    const int c = in.channels(), h = in.height, w = in.width;
    const int oh = h / 2, ow = w / 2;
    if (oh == 0 || ow == 0) fail(ErrorKind::kInput, "feature map too small to pool");
    Batch<S> out;
    out.samples = in.samples;
    out.height = oh;
    out.width = ow;
    out.data.resize(c, Eigen::Index(in.samples) * oh * ow);
    std::vector<int> arg;
    if (cache != nullptr) arg.resize(static_cast<std::size_t>(out.data.size()));
    const S* src = in.data.data();
    S* dst = out.data.data();
    for (int n = 0; n < in.samples; ++n) {
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
          const std::size_t opos = (std::size_t(n) * oh + y) * ow + x;
          const std::size_t p00 = (std::size_t(n) * h + 2 * y) * w + 2 * x;
          const std::size_t cand[4] = {p00, p00 + 1, p00 + w, p00 + w + 1};
          for (int ch = 0; ch < c; ++ch) {
            std::size_t best = cand[0];
            S bv = src[cand[0] * c + ch];
            for (int k = 1; k < 4; ++k) {
              const S v = src[cand[k] * c + ch];
              if (v > bv) {
                bv = v;
                best = cand[k];
              }
            }
            dst[opos * c + ch] = bv;
            if (cache != nullptr) arg[opos * c + ch] = static_cast<int>(best * c + ch);
          }
        }
      }
    }
    if (cache != nullptr) {
      cache->index = std::move(arg);
      cache->in_samples = in.samples;
      cache->in_height = h;
      cache->in_width = w;
    }
    return out;
  }

  Batch<S> backward(std::span<const S>, const LayerCache<S>& cache, const Batch<S>& grad_out,
                    std::span<S>) const override {
    Batch<S> g;
    g.samples = cache.in_samples;
    g.height = cache.in_height;
    g.width = cache.in_width;
    g.data = Matrix<S>::Zero(grad_out.data.rows(),
                             Eigen::Index(g.samples) * g.height * g.width);
    const S* src = grad_out.data.data();
    S* dst = g.data.data();
    for (std::size_t i = 0; i < cache.index.size(); ++i) dst[cache.index[i]] += src[i];
    return g;
  }
};

// Mean over spatial positions; output is C x N with 1x1 maps.
template <typename S>
class GlobalAvgPool final : public Layer<S> {
 public:
  std::string name() const override { return "gap"; }
  Shape output_shape(const Shape& in) const override { return {in.channels, 1, 1}; }

  Batch<S> forward(std::span<const S>, const Batch<S>& in, LayerCache<S>* cache) const override {
    const int hw = in.height * in.width;
    Batch<S> out;
    out.samples = in.samples;
    out.data.resize(in.channels(), in.samples);
    for (int n = 0; n < in.samples; ++n) {
      out.data.col(n) = in.data.middleCols(Eigen::Index(n) * hw, hw).rowwise().mean();
    }
    if (cache != nullptr) {
      cache->in_samples = in.samples;
      cache->in_height = in.height;
      cache->in_width = in.width;
    }
    return out;
  }

  Batch<S> backward(std::span<const S>, const LayerCache<S>& cache, const Batch<S>& grad_out,
                    std::span<S>) const override {
    const int hw = cache.in_height * cache.in_width;
    Batch<S> g;
    g.samples = cache.in_samples;
    g.height = cache.in_height;
    g.width = cache.in_width;
    g.data.resize(grad_out.data.rows(), Eigen::Index(g.samples) * hw);
    for (int n = 0; n < g.samples; ++n) {
      g.data.middleCols(Eigen::Index(n) * hw, hw).colwise() = grad_out.data.col(n) / S(hw);
    }
    return g;
  }
};

// Reshapes each sample's interleaved HWC block into one feature column.
template <typename S>
class Flatten final : public Layer<S> {
 public:
  std::string name() const override { return "flatten"; }
  Shape output_shape(const Shape& in) const override { return {in.size(), 1, 1}; }

  Batch<S> forward(std::span<const S>, const Batch<S>& in, LayerCache<S>* cache) const override {
    const Eigen::Index per = in.data.rows() * in.height * in.width;
    Batch<S> out;
    out.samples = in.samples;
    out.data = Eigen::Map<const Matrix<S>>(in.data.data(), per, in.samples);
    if (cache != nullptr) {
      cache->in_samples = in.samples;
      cache->in_height = in.height;
      cache->in_width = in.width;
      cache->index = {static_cast<int>(in.data.rows())};
    }
    return out;
  }

  Batch<S> backward(std::span<const S>, const LayerCache<S>& cache, const Batch<S>& grad_out,
                    std::span<S>) const override {
    const int channels = cache.index.at(0);
    Batch<S> g;
    g.samples = cache.in_samples;
    g.height = cache.in_height;
    g.width = cache.in_width;
    g.data = Eigen::Map<const Matrix<S>>(grad_out.data.data(), channels,
                                         Eigen::Index(g.samples) * g.height * g.width);
    return g;
  }
};

// Multiplies by a fixed constant (no parameters).
template <typename S>
class Scale final : public Layer<S> {
 public:
  explicit Scale(double factor) : factor_(factor) {}
  std::string name() const override { return "scale"; }
  Shape output_shape(const Shape& in) const override { return in; }

  Batch<S> forward(std::span<const S>, const Batch<S>& in, LayerCache<S>*) const override {
    Batch<S> out = in;
    out.data *= static_cast<S>(factor_);
    return out;
  }
  Batch<S> backward(std::span<const S>, const LayerCache<S>&, const Batch<S>& grad_out,
                    std::span<S>) const override {
    Batch<S> g = grad_out;
    g.data *= static_cast<S>(factor_);
    return g;
  }

 private:
  double factor_;
};

// Three 3x3 convs with ReLU between them plus a 1x1 projection shortcut,
// summed and rectified. Downsampling is left to a following pool layer.
template <typename S>
class ResidualBlock final : public Layer<S> {
 public:
  ResidualBlock(int in_channels, int out_channels)
      : convs_{std::make_shared<Conv2d<S>>(in_channels, out_channels, 3),
               std::make_shared<Conv2d<S>>(out_channels, out_channels, 3),
               std::make_shared<Conv2d<S>>(out_channels, out_channels, 3)},
        shortcut_(std::make_shared<Conv2d<S>>(in_channels, out_channels, 1)),
        out_(out_channels) {}

  std::string name() const override { return "residual" + std::to_string(out_); }
  Shape output_shape(const Shape& in) const override { return {out_, in.height, in.width}; }
  Eigen::Index parameter_count() const override {
    Eigen::Index n = shortcut_->parameter_count();
    for (const auto& c : convs_) n += c->parameter_count();
    return n;
  }

  void initialize(std::span<S> params, Rng& rng) const override {
    std::size_t off = 0;
    for (const auto& c : convs_) {
      c->initialize(params.subspan(off, c->parameter_count()), rng);
      off += c->parameter_count();
    }
    shortcut_->initialize(params.subspan(off, shortcut_->parameter_count()), rng);
  }

  Batch<S> forward(std::span<const S> params, const Batch<S>& in,
                   LayerCache<S>* cache) const override {
    if (cache != nullptr) cache->children.assign(6, LayerCache<S>{});
    auto child = [&](int i) { return cache != nullptr ? &cache->children[i] : nullptr; };
    Relu<S> relu;
    std::size_t off = 0;
    Batch<S> h = in;
    for (int i = 0; i < 3; ++i) {
      h = convs_[i]->forward(params.subspan(off, convs_[i]->parameter_count()), h, child(i));
      off += convs_[i]->parameter_count();
      if (i < 2) h = relu.forward({}, h, child(3 + i));
    }
    Batch<S> skip = shortcut_->forward(params.subspan(off, shortcut_->parameter_count()), in,
                                       child(5));
    h.data += skip.data;
    if (cache != nullptr) cache->saved = h.data;
    h.data = h.data.cwiseMax(S(0));
    return h;
  }

  Batch<S> backward(std::span<const S> params, const LayerCache<S>& cache,
                    const Batch<S>& grad_out, std::span<S> grad_params) const override {
    Relu<S> relu;
    Batch<S> g = grad_out;
    g.data = (cache.saved.array() > S(0)).select(grad_out.data, S(0));
    std::vector<std::size_t> offs;
    std::size_t off = 0;
    for (const auto& c : convs_) {
      offs.push_back(off);
      off += c->parameter_count();
    }
    auto gsub = [&](std::size_t o, Eigen::Index n) {
      return grad_params.empty() ? std::span<S>{} : grad_params.subspan(o, n);
    };
    Batch<S> g_skip = shortcut_->backward(params.subspan(off, shortcut_->parameter_count()),
                                          cache.children[5], g,
                                          gsub(off, shortcut_->parameter_count()));
    Batch<S> h = g;
    for (int i = 2; i >= 0; --i) {
      h = convs_[i]->backward(params.subspan(offs[i], convs_[i]->parameter_count()),
                              cache.children[i], h, gsub(offs[i], convs_[i]->parameter_count()));
      if (i > 0) h = relu.backward({}, cache.children[3 + i - 1], h, {});
    }
    h.data += g_skip.data;
    return h;
  }

 private:
  std::shared_ptr<Conv2d<S>> convs_[3];
  std::shared_ptr<Conv2d<S>> shortcut_;
  int out_;
};

}  // namespace flba::nn

#endif  // FLBA_NN_LAYERS_HPP_
