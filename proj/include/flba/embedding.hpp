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

#ifndef FLBA_EMBEDDING_HPP_
#define FLBA_EMBEDDING_HPP_

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "flba/common.hpp"
#include "flba/dataset.hpp"
#include "flba/image.hpp"
#include "flba/nn/network.hpp"

namespace flba {

using FeatureVector = Eigen::VectorXd;
// Pixel-space array with the same layout as ImageTensor::pixels().
using PixelGradient = std::vector<double>;

// Parameterized feature extractor f_theta. Scalar selects the arithmetic
// used inside the network; features and gradients leave as double.
template <typename S = double>
class EmbeddingModel {
 public:
  using Scalar = S;

  EmbeddingModel() = default;

  static EmbeddingModel create(const nn::Architecture& arch, std::uint64_t seed) {
    EmbeddingModel m;
    m.arch_ = arch;
    m.net_ = std::make_shared<const nn::Network<S>>(nn::Network<S>::build(arch));
    m.params_ = nn::Vector<S>::Zero(m.net_->parameter_count());
    Rng rng(derive_seed(seed, "embedding-init"));
    m.net_->initialize(std::span<S>(m.params_.data(), m.params_.size()), rng);
    return m;
  }

  template <typename T>
  static EmbeddingModel from_parameters(const nn::Architecture& arch, std::span<const T> params,
                                        bool frozen) {
    EmbeddingModel m;
    m.arch_ = arch;
    m.net_ = std::make_shared<const nn::Network<S>>(nn::Network<S>::build(arch));
    if (static_cast<Eigen::Index>(params.size()) != m.net_->parameter_count()) {
      fail(ErrorKind::kInput, "architecture " + nn::describe(arch) + " expects " +
                                  std::to_string(m.net_->parameter_count()) + " parameters, got " +
                                  std::to_string(params.size()));
    }
    m.params_.resize(static_cast<Eigen::Index>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) m.params_[i] = static_cast<S>(params[i]);
    m.frozen_ = frozen;
    return m;
  }

  // Same parameters in another scalar type.
  template <typename T>
  EmbeddingModel<T> cast() const {
    return EmbeddingModel<T>::from_parameters(arch_, parameters(), frozen_);
  }

  const nn::Architecture& architecture() const { return arch_; }
  const nn::Network<S>& network() const { return *net_; }
  nn::Shape input_shape() const { return net_->input_shape(); }
  int feature_dim() const { return net_->output_dim(); }

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  EmbeddingModel thawed_copy() const {
    EmbeddingModel m = *this;
    m.frozen_ = false;
    return m;
  }

  std::span<const S> parameters() const {
    return {params_.data(), static_cast<std::size_t>(params_.size())};
  }
  std::span<S> mutable_parameters() {
    if (frozen_) fail(ErrorKind::kInput, "cannot mutate the parameters of a frozen model");
    return {params_.data(), static_cast<std::size_t>(params_.size())};
  }

  std::uint64_t parameter_hash() const {
    return fnv1a(std::span<const unsigned char>(
        reinterpret_cast<const unsigned char*>(params_.data()),
        static_cast<std::size_t>(params_.size()) * sizeof(S)));
  }

 private:
  nn::Architecture arch_;
  std::shared_ptr<const nn::Network<S>> net_;
  nn::Vector<S> params_;
  bool frozen_ = false;
};

// Cosine distance ----------------------------------------------------------

// d(a, b) = 1 - a.b / (|a| |b| + 1e-12). Zero-norm inputs are rejected.
inline double cosine_distance(const FeatureVector& a, const FeatureVector& b) {
  if (a.size() != b.size()) fail(ErrorKind::kInput, "feature dimensions differ");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) fail(ErrorKind::kNumericDomain, "cosine distance of a zero vector");
  return 1.0 - a.dot(b) / (na * nb + kNormEpsilon);
}

// Gradient of cosine_distance(a, b) with respect to a.
inline FeatureVector cosine_distance_grad(const FeatureVector& a, const FeatureVector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) fail(ErrorKind::kNumericDomain, "cosine distance of a zero vector");
  const double p = na * nb + kNormEpsilon;
  const double dot = a.dot(b);
  return -(b / p) + (dot * nb / (na * p * p)) * a;
}

// Forward / backward helpers -------------------------------------------------

namespace detail {
inline constexpr int kEmbedChunk = 64;
}

// Features for a list of images as a D x N matrix.
template <typename S>
Eigen::MatrixXd embed_batch(const EmbeddingModel<S>& model, std::span<const ImageTensor> images) {
  Eigen::MatrixXd out(model.feature_dim(), static_cast<Eigen::Index>(images.size()));
  for (std::size_t start = 0; start < images.size(); start += detail::kEmbedChunk) {
    const std::size_t n = std::min<std::size_t>(detail::kEmbedChunk, images.size() - start);
    auto batch = model.network().pack(images.subspan(start, n));
    out.middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        model.network().forward(model.parameters(), batch).template cast<double>();
  }
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    if (!std::isfinite(out.data()[i])) fail(ErrorKind::kNumeric, "non-finite feature value");
  }
  return out;
}

template <typename S>
FeatureVector embed(const EmbeddingModel<S>& model, const ImageTensor& image) {
  return embed_batch(model, std::span<const ImageTensor>(&image, 1)).col(0);
}

// Per-sample objective on features: returns the value and writes the
// gradient into *grad when grad is non-null.
using FeatureLoss = std::function<double(const FeatureVector& feature, FeatureVector* grad)>;

// Batched objective: sample index, feature, gradient out.
using IndexedFeatureLoss =
    std::function<double(std::size_t index, const FeatureVector& feature, FeatureVector* grad)>;

struct InputGradients {
  std::vector<double> losses;
  std::vector<PixelGradient> gradients;
  Eigen::MatrixXd features;
};

// Evaluates loss(i, f(images[i])) for every image and back-propagates each
// loss to its own input pixels. Chunked so memory stays bounded.
template <typename S>
InputGradients input_gradients(const EmbeddingModel<S>& model, std::span<const ImageTensor> images,
                               const IndexedFeatureLoss& loss) {
  const auto& net = model.network();
  InputGradients out;
  out.losses.resize(images.size());
  out.gradients.resize(images.size());
  out.features.resize(model.feature_dim(), static_cast<Eigen::Index>(images.size()));
  for (std::size_t start = 0; start < images.size(); start += detail::kEmbedChunk) {
    const std::size_t n = std::min<std::size_t>(detail::kEmbedChunk, images.size() - start);
    auto batch = net.pack(images.subspan(start, n));
    typename nn::Network<S>::Tape tape;
    nn::Matrix<S> feats = net.forward(model.parameters(), batch, &tape);
    nn::Matrix<S> gfeat(feats.rows(), feats.cols());
    for (std::size_t j = 0; j < n; ++j) {
      FeatureVector f = feats.col(static_cast<Eigen::Index>(j)).template cast<double>();
      FeatureVector g = FeatureVector::Zero(f.size());
      out.losses[start + j] = loss(start + j, f, &g);
      if (!std::isfinite(out.losses[start + j]) || !g.allFinite()) {
        fail(ErrorKind::kNumeric, "non-finite loss or feature gradient for sample " +
                                      std::to_string(start + j));
      }
      gfeat.col(static_cast<Eigen::Index>(j)) = g.cast<S>();
      out.features.col(static_cast<Eigen::Index>(start + j)) = f;
    }
    nn::Batch<S> gin = net.backward(model.parameters(), tape, gfeat);
    const Eigen::Index per = net.input_shape().size();
    for (std::size_t j = 0; j < n; ++j) {
      const S* src = gin.data.data() + static_cast<Eigen::Index>(j) * per;
      PixelGradient& g = out.gradients[start + j];
      g.resize(static_cast<std::size_t>(per));
      for (Eigen::Index i = 0; i < per; ++i) {
        g[i] = static_cast<double>(src[i]);
        if (!std::isfinite(g[i])) fail(ErrorKind::kNumeric, "non-finite input gradient");
      }
    }
  }
  return out;
}

// d loss(f(image)) / d pixels.
template <typename S>
PixelGradient grad_wrt_input(const EmbeddingModel<S>& model, const FeatureLoss& loss,
                             const ImageTensor& image) {
  auto r = input_gradients(model, std::span<const ImageTensor>(&image, 1),
                           [&](std::size_t, const FeatureVector& f, FeatureVector* g) {
                             return loss(f, g);
                           });
  return std::move(r.gradients.front());
}

// Checkpoints ----------------------------------------------------------------
//
// Text header, one "key value" per line, then raw little-endian float64
// parameters:
//   FLBA-EMBEDDING-CHECKPOINT
//   version 1
//   architecture <name>
//   input <channels> <height> <width>
//   widths <n> <w1> ... <wn>
//   scale <double>
//   feature_dim <D>
//   fingerprint <hex64>
//   parameters <count>
//   payload
//   <count * 8 bytes>

inline constexpr const char* kCheckpointMagic = "FLBA-EMBEDDING-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void append_le64(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>(bits & 0xff));
    bits >>= 8;
  }
}

inline double read_le64(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | static_cast<unsigned char>(p[i]);
  return std::bit_cast<double>(bits);
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

template <typename S>
std::string serialize_checkpoint(const EmbeddingModel<S>& model, std::uint64_t fingerprint = 0) {
  const auto& a = model.architecture();
  std::ostringstream h;
  h << kCheckpointMagic << '\n'
    << "version " << kCheckpointVersion << '\n'
    << "architecture " << a.name << '\n'
    << "input " << a.input.channels << ' ' << a.input.height << ' ' << a.input.width << '\n'
    << "widths " << a.widths.size();
  for (int w : a.widths) h << ' ' << w;
  h << '\n'
    << "scale " << detail::format_double(a.scale) << '\n'
    << "feature_dim " << model.feature_dim() << '\n'
    << "fingerprint " << hex64(fingerprint) << '\n'
    << "parameters " << model.parameters().size() << '\n'
    << "payload\n";
  std::string out = h.str();
  for (S p : model.parameters()) detail::append_le64(out, static_cast<double>(p));
  return out;
}

struct CheckpointHeader {
  nn::Architecture architecture;
  int feature_dim = 0;
  std::uint64_t fingerprint = 0;
  std::size_t parameter_count = 0;
};

struct LoadedCheckpoint {
  CheckpointHeader header;
  std::vector<double> parameters;
};

inline LoadedCheckpoint parse_checkpoint(const std::string& bytes) {
  auto bad = [](const std::string& why) { fail(ErrorKind::kLoad, "checkpoint: " + why); };
  std::size_t pos = 0;
  auto next_line = [&]() {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) bad("truncated header");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != kCheckpointMagic) bad("bad magic string");
  LoadedCheckpoint ck;
  auto& hdr = ck.header;
  auto expect = [&](const std::string& key) {
    std::istringstream ls(next_line());
    std::string k;
    ls >> k;
    if (k != key) bad("expected '" + key + "', found '" + k + "'");
    return ls.str().substr(std::min(ls.str().size(), key.size() + 1));
  };
  if (std::stoi(expect("version")) != kCheckpointVersion) bad("unsupported format version");
  hdr.architecture.name = expect("architecture");
  {
    std::istringstream ls(expect("input"));
    ls >> hdr.architecture.input.channels >> hdr.architecture.input.height >>
        hdr.architecture.input.width;
    if (!ls) bad("malformed input shape");
  }
  {
    std::istringstream ls(expect("widths"));
    std::size_t n = 0;
    ls >> n;
    hdr.architecture.widths.resize(n);
    for (auto& w : hdr.architecture.widths) ls >> w;
    if (!ls) bad("malformed widths");
  }
  hdr.architecture.scale = std::stod(expect("scale"));
  hdr.feature_dim = std::stoi(expect("feature_dim"));
  hdr.fingerprint = std::stoull(expect("fingerprint"), nullptr, 16);
  hdr.parameter_count = std::stoull(expect("parameters"));
  if (next_line() != "payload") bad("missing payload marker");
  if (bytes.size() - pos != hdr.parameter_count * 8) bad("payload size does not match header");
  ck.parameters.resize(hdr.parameter_count);
  for (std::size_t i = 0; i < hdr.parameter_count; ++i) {
    ck.parameters[i] = detail::read_le64(bytes.data() + pos + i * 8);
  }
  return ck;
}

// Loads a checkpoint as a frozen model, validating the header against the
// rebuilt architecture.
template <typename S>
EmbeddingModel<S> load_checkpoint(const std::filesystem::path& path,
                                  std::uint64_t* fingerprint = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingArtifact, "checkpoint " + path.string() + " not found");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  LoadedCheckpoint ck = parse_checkpoint(bytes);
  auto model = EmbeddingModel<S>::template from_parameters<double>(
      ck.header.architecture, std::span<const double>(ck.parameters), true);
  if (model.feature_dim() != ck.header.feature_dim) {
    fail(ErrorKind::kLoad, "checkpoint: feature_dim does not match architecture");
  }
  if (fingerprint != nullptr) *fingerprint = ck.header.fingerprint;
  return model;
}

template <typename S>
void save_checkpoint(const EmbeddingModel<S>& model, const std::filesystem::path& path,
                     std::uint64_t fingerprint = 0) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(model, fingerprint);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "short write to " + path.string());
}

// Feature export: CSV with header source_id,label,f0..f{D-1}.
template <typename S>
void export_features(const EmbeddingModel<S>& model, const std::vector<LabeledExample>& examples,
                     const std::filesystem::path& out_path) {
  std::ofstream out(out_path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + out_path.string());
  out << "source_id,label";
  for (int i = 0; i < model.feature_dim(); ++i) out << ",f" << i;
  out << '\n';
  const std::vector<ImageTensor> images = images_of(examples);
  const Eigen::MatrixXd feats = embed_batch(model, std::span<const ImageTensor>(images));
  for (std::size_t n = 0; n < examples.size(); ++n) {
    out << examples[n].source_id << ',' << examples[n].label;
    for (int i = 0; i < model.feature_dim(); ++i) {
      out << ',' << detail::format_double(feats(i, static_cast<Eigen::Index>(n)));
    }
    out << '\n';
  }
  if (!out) fail(ErrorKind::kIo, "short write to " + out_path.string());
}

}  // namespace flba

#endif  // FLBA_EMBEDDING_HPP_
