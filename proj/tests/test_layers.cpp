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


#include <memory>
#include <vector>

#include <gtest/gtest.h>

#include "flba/nn/network.hpp"
#include "test_support.hpp"

namespace flba::nn {
namespace {

// L = sum(weights .* forward(x)); checks d/dx and d/dparams against central
// differences.
struct GradCheck {
  double input_max_rel = 0.0;
  double param_max_rel = 0.0;
};

GradCheck check_network(const Network<double>& net, std::uint64_t seed, int samples = 2) {
  Rng rng(seed);
  Vector<double> params(net.parameter_count());
  net.initialize(std::span<double>(params.data(), params.size()), rng);
  for (Eigen::Index i = 0; i < params.size(); ++i) params[i] += normal(rng, 0, 0.05);
  std::vector<ImageTensor> imgs;
  const Shape in = net.input_shape();
  for (int n = 0; n < samples; ++n) imgs.push_back(testing::random_image(in.height, in.width, in.channels, rng));
  Batch<double> batch = net.pack(std::span<const ImageTensor>(imgs));
  const std::span<const double> p(params.data(), params.size());
  typename Network<double>::Tape tape;
  const Matrix<double> out = net.forward(p, batch, &tape);
  Matrix<double> w(out.rows(), out.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng, 0, 1);
  Vector<double> gp = Vector<double>::Zero(params.size());
  const Batch<double> gx = net.backward(p, tape, w, std::span<double>(gp.data(), gp.size()));

  auto loss = [&](const Vector<double>& pp, const Batch<double>& b) {
    return (net.forward(std::span<const double>(pp.data(), pp.size()), b).array() * w.array()).sum();
  };
  const double h = 1e-6;
  GradCheck r;
  for (Eigen::Index i = 0; i < batch.data.size(); ++i) {
    Batch<double> plus = batch, minus = batch;
    plus.data.data()[i] += h;
    minus.data.data()[i] -= h;
    const double fd = (loss(params, plus) - loss(params, minus)) / (2 * h);
    r.input_max_rel = std::max(r.input_max_rel, testing::relative_error(gx.data.data()[i], fd));
  }
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    Vector<double> plus = params, minus = params;
    plus[i] += h;
    minus[i] -= h;
    const double fd = (loss(plus, batch) - loss(minus, batch)) / (2 * h);
    r.param_max_rel = std::max(r.param_max_rel, testing::relative_error(gp[i], fd));
  }
  return r;
}

Network<double> single(LayerPtr<double> layer, Shape in) { return Network<double>({std::move(layer)}, in); }

TEST(Layers, ConvGradients) {
  for (int k : {1, 3, 5}) {
    const auto r = check_network(single(std::make_shared<Conv2d<double>>(2, 3, k), {2, 5, 4}), 10 + k);
    EXPECT_LT(r.input_max_rel, 1e-6) << "kernel " << k;
    EXPECT_LT(r.param_max_rel, 1e-6) << "kernel " << k;
  }
}

TEST(Layers, ConvRejectsEvenKernelsAndWrongChannels) {
  EXPECT_THROW(Conv2d<double>(2, 3, 2), Error);
  auto net = single(std::make_shared<Conv2d<double>>(2, 3, 3), {2, 4, 4});
  Vector<double> p = Vector<double>::Zero(net.parameter_count());
  Batch<double> b;
  b.data = Matrix<double>::Zero(3, 16);
  b.samples = 1;
  b.height = 4;
  b.width = 4;
  EXPECT_THROW(net.forward(std::span<const double>(p.data(), p.size()), b), Error);
}

TEST(Layers, PoolingAndActivationGradients) {
  // Random inputs keep ReLU and max-pool away from their kinks.
  auto r = check_network(single(std::make_shared<MaxPool2<double>>(), {3, 6, 4}), 21);
  EXPECT_LT(r.input_max_rel, 1e-6);
  r = check_network(single(std::make_shared<GlobalAvgPool<double>>(), {3, 3, 5}), 22);
  EXPECT_LT(r.input_max_rel, 1e-6);
  r = check_network(single(std::make_shared<Flatten<double>>(), {2, 3, 2}), 23);
  EXPECT_LT(r.input_max_rel, 1e-6);
  r = check_network(single(std::make_shared<Scale<double>>(2.5), {2, 3, 2}), 24);
  EXPECT_LT(r.input_max_rel, 1e-6);
}

TEST(Layers, ReluPassesPositiveGradientOnly) {
  auto net = single(std::make_shared<Relu<double>>(), {1, 1, 2});
  Batch<double> b;
  b.data.resize(1, 2);
  b.data << -0.5, 0.7;
  b.samples = 1;
  b.height = 1;
  b.width = 2;
  Network<double>::Tape tape;
  const auto out = net.forward({}, b, &tape);
  EXPECT_DOUBLE_EQ(out(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(out(0, 1), 0.7);
  Matrix<double> g(1, 2);
  g << 1.0, 1.0;
  const auto gx = net.backward({}, tape, g);
  EXPECT_DOUBLE_EQ(gx.data(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(gx.data(0, 1), 1.0);
}

TEST(Layers, MaxPoolOddSizesTruncate) {
  const Shape s = MaxPool2<double>().output_shape({2, 5, 7});
  EXPECT_EQ(s.height, 2);
  EXPECT_EQ(s.width, 3);
}

TEST(Layers, ResidualBlockGradients) {
  const auto r = check_network(single(std::make_shared<ResidualBlock<double>>(2, 3), {2, 4, 4}), 31);
  EXPECT_LT(r.input_max_rel, 1e-5);
  EXPECT_LT(r.param_max_rel, 1e-5);
}

TEST(Network, BuiltArchitecturesHaveExpectedShapes) {
  Architecture a;
  a.input = {3, 32, 32};
  a.widths = {16, 32, 64};
  auto conv = Network<double>::build(a);
  EXPECT_EQ(conv.output_dim(), 64);
  a.name = "resnet12";
  a.widths = {8, 16, 32, 64};
  EXPECT_EQ(Network<double>::build(a).output_dim(), 64);
  a.name = "identity";
  EXPECT_EQ(Network<double>::build(a).output_dim(), 3 * 32 * 32);
  EXPECT_EQ(Network<double>::build(a).parameter_count(), 0);
}

TEST(Network, BuildErrors) {
  Architecture a;
  a.name = "vgg";
  EXPECT_THROW(Network<double>::build(a), Error);
  a.name = "conv";
  a.widths = {};
  EXPECT_THROW(Network<double>::build(a), Error);
  a.widths = {4, 4, 4, 4, 4, 4};
  a.input = {3, 16, 16};
  EXPECT_THROW(Network<double>::build(a), Error);
}

TEST(Network, WholeConvNetworkGradients) {
  Architecture a = testing::small_conv(8);
  const auto r = check_network(Network<double>::build(a), 41, 3);
  EXPECT_LT(r.input_max_rel, 1e-4);
  EXPECT_LT(r.param_max_rel, 1e-4);
}

TEST(Network, FloatAndDoubleAgree) {
  Architecture a = testing::small_conv(8);
  auto nd = Network<double>::build(a);
  auto nf = Network<float>::build(a);
  Rng rng(5);
  Vector<double> pd(nd.parameter_count());
  nd.initialize(std::span<double>(pd.data(), pd.size()), rng);
  Vector<float> pf = pd.cast<float>();
  std::vector<ImageTensor> imgs{testing::random_image(8, 8, 3, rng)};
  const auto od = nd.forward(std::span<const double>(pd.data(), pd.size()), nd.pack(std::span<const ImageTensor>(imgs)));
  const auto of = nf.forward(std::span<const float>(pf.data(), pf.size()), nf.pack(std::span<const ImageTensor>(imgs)));
  EXPECT_LT((od - of.cast<double>()).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Network, PackRejectsMismatchedImages) {
  auto net = Network<double>::build(testing::small_conv(8));
  std::vector<ImageTensor> imgs{ImageTensor(8, 7, 3)};
  EXPECT_THROW(net.pack(std::span<const ImageTensor>(imgs)), Error);
}

}  // namespace
}  // namespace flba::nn
