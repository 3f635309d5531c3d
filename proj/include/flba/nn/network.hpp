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

#ifndef FLBA_NN_NETWORK_HPP_
#define FLBA_NN_NETWORK_HPP_

#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "flba/image.hpp"
#include "flba/nn/layers.hpp"

namespace flba::nn {

// Named architecture plus the metadata needed to rebuild it.
//   identity        flatten the image into its feature vector
//   scaled-identity identity times `scale`
//   conv            one (3x3 conv, relu, 2x2 max-pool) block per width, then
//                   global average pooling; D = last width
//   resnet12        one residual block + pool per width, then global
//                   average pooling; D = last width
struct Architecture {
  std::string name = "conv";
  Shape input{3, 32, 32};
  std::vector<int> widths{16, 32, 64};
  double scale = 1.0;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

inline std::string describe(const Architecture& arch) {
  std::ostringstream os;
  os << arch.name << '[';
  for (std::size_t i = 0; i < arch.widths.size(); ++i) os << (i ? "," : "") << arch.widths[i];
  os << ']';
  return os.str();
}

template <typename S>
class Network {
 public:
  Network(std::vector<LayerPtr<S>> layers, Shape input)
      : layers_(std::move(layers)), input_(input) {
    Shape s = input_;
    for (const auto& l : layers_) {
      offsets_.push_back(total_);
      total_ += l->parameter_count();
      s = l->output_shape(s);
    }
    output_ = s;
  }

  static Network build(const Architecture& arch) {
    std::vector<LayerPtr<S>> layers;
    if (arch.name == "identity" || arch.name == "scaled-identity") {
      layers.push_back(std::make_shared<Flatten<S>>());
      if (arch.name == "scaled-identity") layers.push_back(std::make_shared<Scale<S>>(arch.scale));
    } else if (arch.name == "conv" || arch.name == "resnet12") {
      if (arch.widths.empty()) fail(ErrorKind::kConfig, arch.name + " needs at least one width");
      int in = arch.input.channels;
      for (int w : arch.widths) {
        if (w <= 0) fail(ErrorKind::kConfig, "layer widths must be positive");
        if (arch.name == "conv") {
          layers.push_back(std::make_shared<Conv2d<S>>(in, w, 3));
          layers.push_back(std::make_shared<Relu<S>>());
        } else {
          layers.push_back(std::make_shared<ResidualBlock<S>>(in, w));
        }
        layers.push_back(std::make_shared<MaxPool2<S>>());
        in = w;
      }
      layers.push_back(std::make_shared<GlobalAvgPool<S>>());
      const int shrink = 1 << arch.widths.size();
      if (arch.input.height < shrink || arch.input.width < shrink) {
        fail(ErrorKind::kConfig, "input " + std::to_string(arch.input.height) + "x" +
                                     std::to_string(arch.input.width) + " too small for " +
                                     std::to_string(arch.widths.size()) + " pooling stages");
      }
    } else {
      fail(ErrorKind::kConfig, "unknown architecture '" + arch.name + "'");
    }
    return Network(std::move(layers), arch.input);
  }

  Eigen::Index parameter_count() const { return total_; }
  Shape input_shape() const { return input_; }
  int output_dim() const { return output_.size(); }

  void initialize(std::span<S> params, Rng& rng) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i]->initialize(params.subspan(offsets_[i], layers_[i]->parameter_count()), rng);
    }
  }

  // Packs images into a batch; every image must match the input shape.
  Batch<S> pack(std::span<const ImageTensor> images) const {
    Batch<S> b;
    b.samples = static_cast<int>(images.size());
    b.height = input_.height;
    b.width = input_.width;
    const Eigen::Index per = input_.size();
    b.data.resize(input_.channels, Eigen::Index(b.samples) * input_.height * input_.width);
    for (int n = 0; n < b.samples; ++n) {
      const ImageTensor& img = images[n];
      if (img.channels() != input_.channels || img.height() != input_.height ||
          img.width() != input_.width) {
        fail(ErrorKind::kInput,
             "image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) + "x" +
                 std::to_string(img.channels()) + " does not match model input " +
                 std::to_string(input_.height) + "x" + std::to_string(input_.width) + "x" +
                 std::to_string(input_.channels));
      }
      S* dst = b.data.data() + n * per;
      auto px = img.pixels();
      for (Eigen::Index i = 0; i < per; ++i) dst[i] = static_cast<S>(px[i]);
    }
    return b;
  }

  struct Tape {
    std::vector<LayerCache<S>> caches;
  };

  // Returns D x N features.
  Matrix<S> forward(std::span<const S> params, const Batch<S>& in, Tape* tape = nullptr) const {
    check_params(params);
    if (tape != nullptr) tape->caches.assign(layers_.size(), LayerCache<S>{});
    Batch<S> h = in;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i]->forward(params.subspan(offsets_[i], layers_[i]->parameter_count()), h,
                              tape != nullptr ? &tape->caches[i] : nullptr);
    }
    return std::move(h.data);
  }

  // Back-propagates D x N feature gradients. Accumulates into grad_params
  // when it is non-empty and returns the input-batch gradient.
  Batch<S> backward(std::span<const S> params, const Tape& tape, const Matrix<S>& grad_features,
                    std::span<S> grad_params = {}) const {
    Batch<S> g;
    g.data = grad_features;
    g.samples = static_cast<int>(grad_features.cols());
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const auto n = layers_[i]->parameter_count();
      g = layers_[i]->backward(params.subspan(offsets_[i], n), tape.caches[i], g,
                               grad_params.empty() ? std::span<S>{}
                                                   : grad_params.subspan(offsets_[i], n));
    }
    return g;
  }

 private:
  void check_params(std::span<const S> params) const {
    if (static_cast<Eigen::Index>(params.size()) != total_) {
      fail(ErrorKind::kInput, "parameter vector has " + std::to_string(params.size()) +
                                  " entries, network expects " + std::to_string(total_));
    }
  }

  std::vector<LayerPtr<S>> layers_;
  std::vector<std::size_t> offsets_;
  Eigen::Index total_ = 0;
  Shape input_;
  Shape output_;
};

}  // namespace flba::nn

#endif  // FLBA_NN_NETWORK_HPP_
