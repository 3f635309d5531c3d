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


#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "flba/embedding.hpp"
#include "test_support.hpp"

namespace flba {
namespace {

TEST(Cosine, KnownValues) {
  FeatureVector a(2), b(2);
  a << 1, 0;
  b << 0, 3;
  EXPECT_NEAR(cosine_distance(a, b), 1.0, 1e-12);
  EXPECT_NEAR(cosine_distance(a, 2 * a), 0.0, 1e-12);
  // The norm product carries a 1e-12 guard.
  EXPECT_DOUBLE_EQ(cosine_distance(a, -a), 1.0 + 1.0 / (1.0 + 1e-12));
}

TEST(Cosine, ZeroNormAndDimensionErrors) {
  FeatureVector a(2), z = FeatureVector::Zero(2), c(3);
  a << 1, 2;
  c << 1, 2, 3;
  try {
    cosine_distance(a, z);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumericDomain);
  }
  EXPECT_THROW(cosine_distance_grad(z, a), Error);
  EXPECT_THROW(cosine_distance(a, c), Error);
}

TEST(Cosine, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    FeatureVector a(6), b(6);
    for (int i = 0; i < 6; ++i) {
      a[i] = normal(rng);
      b[i] = normal(rng);
    }
    const FeatureVector g = cosine_distance_grad(a, b);
    for (int i = 0; i < 6; ++i) {
      FeatureVector p = a, m = a;
      p[i] += 1e-6;
      m[i] -= 1e-6;
      const double fd = (cosine_distance(p, b) - cosine_distance(m, b)) / 2e-6;
      EXPECT_LT(testing::relative_error(g[i], fd), 1e-5);
    }
  }
}

TEST(Embed, DeterministicAndShapeChecked) {
  const auto m = testing::random_conv(3);
  Rng rng(1);
  const ImageTensor x = testing::random_image(8, 8, 3, rng);
  const FeatureVector a = embed(m, x), b = embed(m, x);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), m.feature_dim());
  try {
    embed(m, ImageTensor(9, 8, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInput);
  }
}

TEST(Embed, BatchMatchesSingles) {
  const auto m = testing::random_conv(3);
  Rng rng(2);
  std::vector<ImageTensor> imgs;
  for (int i = 0; i < 70; ++i) imgs.push_back(testing::random_image(8, 8, 3, rng));  // spans two chunks
  const Eigen::MatrixXd f = embed_batch(m, std::span<const ImageTensor>(imgs));
  for (int i : {0, 63, 64, 69}) EXPECT_LT((f.col(i) - embed(m, imgs[i])).norm(), 1e-12);
}

TEST(Embed, IdentityArchitectureReturnsPixels) {
  const auto m = testing::frozen_identity(1, 3, 1);
  const FeatureVector f = embed(m, testing::row_image({0.1, 0.2, 0.3}));
  EXPECT_DOUBLE_EQ(f[2], 0.3);
}

TEST(GradWrtInput, MatchesFiniteDifferences) {
  Rng rng(8);
  for (int t = 0; t < 5; ++t) {
    const auto m = testing::random_conv(100 + t);
    const ImageTensor x = testing::random_image(8, 8, 3, rng);
    FeatureVector target(m.feature_dim());
    for (Eigen::Index i = 0; i < target.size(); ++i) target[i] = uniform(rng, 0, 1);
    EXPECT_GE(testing::gradient_agreement(m, testing::cosine_to(target), x), 0.95);
  }
}

TEST(GradWrtInput, NonFiniteLossIsANumericError) {
  const auto m = testing::random_conv(1);
  const FeatureLoss bad = [](const FeatureVector& f, FeatureVector* g) {
    if (g != nullptr) *g = FeatureVector::Constant(f.size(), std::numeric_limits<double>::quiet_NaN());
    return 0.0;
  };
  try {
    grad_wrt_input(m, bad, ImageTensor(8, 8, 3, 0.5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumeric);
  }
}

TEST(Model, FrozenParametersAreReadOnly) {
  auto m = testing::random_conv(1);
  EXPECT_TRUE(m.frozen());
  EXPECT_THROW(m.mutable_parameters(), Error);
  auto t = m.thawed_copy();
  EXPECT_NO_THROW(t.mutable_parameters()[0] += 1.0);
  EXPECT_NE(t.parameter_hash(), m.parameter_hash());
}

TEST(Model, FloatCastKeepsFeaturesClose) {
  const auto m = testing::random_conv(5);
  const auto f = m.cast<float>();
  Rng rng(3);
  const ImageTensor x = testing::random_image(8, 8, 3, rng);
  EXPECT_LT((embed(m, x) - embed(f, x)).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_THROW((EmbeddingModel<double>::from_parameters<double>(m.architecture(), std::span<const double>(), true)),
               Error);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  testing::TempDir dir("ckpt");
  const auto m = testing::random_conv(9);
  save_checkpoint(m, dir.path / "a.ckpt", 0xabcULL);
  std::uint64_t fp = 0;
  const auto back = load_checkpoint<double>(dir.path / "a.ckpt", &fp);
  EXPECT_EQ(fp, 0xabcULL);
  EXPECT_TRUE(back.frozen());
  EXPECT_EQ(back.architecture(), m.architecture());
  EXPECT_EQ(back.parameter_hash(), m.parameter_hash());
  EXPECT_EQ(serialize_checkpoint(back, fp), serialize_checkpoint(m, fp));
}

TEST(Checkpoint, CorruptionIsALoadError) {
  const std::string good = serialize_checkpoint(testing::random_conv(1));
  auto expect_load = [](const std::string& bytes) {
    try {
      parse_checkpoint(bytes);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kLoad);
    }
  };
  expect_load("NOT-A-CHECKPOINT\n");
  expect_load(good.substr(0, good.size() - 3));
  expect_load(good.substr(0, 40));
  std::string wrong_key = good;
  wrong_key.replace(wrong_key.find("scale"), 5, "scalf");
  expect_load(wrong_key);
}

TEST(Checkpoint, MissingFileIsAMissingArtifact) {
  try {
    load_checkpoint<double>("/nonexistent/flba.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingArtifact);
  }
}

TEST(FeatureExport, WritesOneRowPerExample) {
  testing::TempDir dir("features");
  const auto m = testing::random_conv(2);
  const DatasetSplits d = testing::tiny_dataset(1, 4, 8);
  export_features(m, d.support_pool.examples, dir.path / "f.csv");
  std::ifstream in(dir.path / "f.csv");
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header.rfind("source_id,label,f0,", 0), 0u);
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 1 + m.feature_dim());
  }
  EXPECT_EQ(rows, static_cast<int>(d.support_pool.examples.size()));
  try {
    export_features(m, d.support_pool.examples, "/nonexistent/dir/f.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
  }
}

}  // namespace
}  // namespace flba
