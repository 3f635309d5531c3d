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


#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <gtest/gtest.h>

#include "flba/dataset.hpp"
#include "flba/image_io.hpp"
#include "test_support.hpp"

namespace flba {
namespace {

namespace fs = std::filesystem;

TEST(Synthetic, TenClassSplitContract) {
  SyntheticSpec s;
  s.num_classes = 10;
  s.per_class = 40;
  s.resolution = 32;
  const DatasetSplits d = generate_synthetic_dataset(s);
  EXPECT_EQ(d.auxiliary.class_set.size(), 5u);
  EXPECT_EQ(d.support_pool.class_set.size(), 5u);
  EXPECT_EQ(d.support_pool.class_set, d.query_pool.class_set);
  EXPECT_EQ(d.auxiliary.examples.size(), 200u);
  EXPECT_EQ(d.support_pool.examples.size(), 100u);
  EXPECT_EQ(d.query_pool.examples.size(), 100u);
  std::set<std::string> ids;
  for (const auto* split : {&d.auxiliary, &d.support_pool, &d.query_pool}) {
    for (const auto& e : split->examples) {
      EXPECT_TRUE(ids.insert(e.source_id).second) << e.source_id;
      EXPECT_EQ(e.image.height(), 32);
      EXPECT_EQ(e.image.channels(), 3);
    }
  }
  for (const auto& c : d.auxiliary.class_set) {
    EXPECT_FALSE(std::binary_search(d.support_pool.class_set.begin(), d.support_pool.class_set.end(), c));
  }
  EXPECT_NO_THROW(validate(d));
}

TEST(Synthetic, SameSeedIsBitIdenticalOtherSeedDiffers) {
  const DatasetSplits a = testing::tiny_dataset(5), b = testing::tiny_dataset(5), c = testing::tiny_dataset(6);
  ASSERT_EQ(a.support_pool.examples.size(), b.support_pool.examples.size());
  for (std::size_t i = 0; i < a.support_pool.examples.size(); ++i) {
    ASSERT_EQ(a.support_pool.examples[i].image, b.support_pool.examples[i].image);
  }
  EXPECT_NE(a.support_pool.examples[0].image, c.support_pool.examples[0].image);
}

TEST(Synthetic, FullScaleShape) {
  // Counts only; a small resolution keeps memory modest.
  SyntheticSpec s;
  s.num_classes = 100;
  s.per_class = 600;
  s.resolution = 4;
  const DatasetSplits d = generate_synthetic_dataset(s);
  std::set<std::string> classes;
  std::size_t total = 0;
  for (const auto* split : {&d.auxiliary, &d.support_pool, &d.query_pool}) {
    total += split->examples.size();
    classes.insert(split->class_set.begin(), split->class_set.end());
  }
  EXPECT_EQ(classes.size(), 100u);
  EXPECT_EQ(total, 60000u);
}

TEST(Synthetic, InvalidSizesAreConfigErrors) {
  SyntheticSpec s;
  s.num_classes = 5;
  try {
    generate_synthetic_dataset(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
  s.num_classes = 10;
  s.per_class = 1;
  EXPECT_THROW(generate_synthetic_dataset(s), Error);
  s.per_class = 10;
  s.resolution = 2;
  EXPECT_THROW(generate_synthetic_dataset(s), Error);
}

TEST(Synthetic, ClassesAreSeparableByMeanColour) {
  // Nearest class-mean on raw pixels should beat chance by a wide margin.
  const DatasetSplits d = testing::tiny_dataset(3, 20, 16);
  std::map<std::string, Eigen::VectorXd> mean;
  std::map<std::string, int> count;
  for (const auto& e : d.support_pool.examples) {
    Eigen::Map<const Eigen::VectorXd> v(e.image.pixels().data(), static_cast<Eigen::Index>(e.image.size()));
    if (!mean.contains(e.label)) mean[e.label] = Eigen::VectorXd::Zero(v.size());
    mean[e.label] += v;
    ++count[e.label];
  }
  int correct = 0;
  for (const auto& e : d.query_pool.examples) {
    Eigen::Map<const Eigen::VectorXd> v(e.image.pixels().data(), static_cast<Eigen::Index>(e.image.size()));
    std::string best;
    double best_d = 1e300;
    for (const auto& [c, m] : mean) {
      const double dist = (v - m / count[c]).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    correct += best == e.label;
  }
  EXPECT_GT(static_cast<double>(correct) / d.query_pool.examples.size(), 0.6);
}

TEST(Episodes, SizesAndDisjointness) {
  const DatasetSplits d = testing::tiny_dataset(1, 40, 8);
  EpisodeSpec spec;
  spec.shots = 5;
  spec.queries_per_class = 15;
  spec.seed = 9;
  const Episode ep = sample_episode(d.support_pool, d.query_pool, spec);
  EXPECT_EQ(ep.support.size(), 25u);
  EXPECT_EQ(ep.query.size(), 75u);
  EXPECT_EQ(ep.class_order.size(), 5u);
  EXPECT_NE(std::find(ep.class_order.begin(), ep.class_order.end(), ep.target_class), ep.class_order.end());
  EXPECT_EQ(ep.target_class, ep.class_order[0]);
  std::set<std::string> ids;
  for (const auto& e : ep.support) ids.insert(e.source_id);
  for (const auto& e : ep.query) EXPECT_FALSE(ids.contains(e.source_id));
  spec.shots = 1;
  EXPECT_EQ(sample_episode(d.support_pool, d.query_pool, spec).support.size(), 5u);
}

TEST(Episodes, DeterministicPerSeed) {
  const DatasetSplits d = testing::tiny_dataset(1);
  const Episode a = testing::tiny_episode(d, 4), b = testing::tiny_episode(d, 4), c = testing::tiny_episode(d, 5);
  ASSERT_EQ(a.support.size(), b.support.size());
  for (std::size_t i = 0; i < a.support.size(); ++i) EXPECT_EQ(a.support[i].source_id, b.support[i].source_id);
  for (std::size_t i = 0; i < a.query.size(); ++i) EXPECT_EQ(a.query[i].source_id, b.query[i].source_id);
  EXPECT_EQ(a.target_class, b.target_class);
  bool differs = a.class_order != c.class_order;
  for (std::size_t i = 0; !differs && i < a.support.size(); ++i) differs = a.support[i].source_id != c.support[i].source_id;
  EXPECT_TRUE(differs);
}

TEST(Episodes, TargetSelection) {
  const DatasetSplits d = testing::tiny_dataset(1);
  EpisodeSpec spec;
  spec.shots = 1;
  spec.queries_per_class = 1;
  spec.target_index = 3;
  const Episode ep = sample_episode(d.support_pool, d.query_pool, spec);
  EXPECT_EQ(ep.target_class, ep.class_order[3]);
  spec.target_label = ep.class_order[1];
  EXPECT_EQ(sample_episode(d.support_pool, d.query_pool, spec).target_class, ep.class_order[1]);
  spec.target_label.clear();
  spec.target_index = 5;
  EXPECT_THROW(sample_episode(d.support_pool, d.query_pool, spec), Error);
}

TEST(Episodes, InsufficientExamplesIsASamplingError) {
  const DatasetSplits d = testing::tiny_dataset(1, 8, 8);
  EpisodeSpec spec;
  spec.shots = 5;  // 4 per class in the support pool
  try {
    sample_episode(d.support_pool, d.query_pool, spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kSampling);
  }
  spec.shots = 1;
  spec.ways = 6;
  EXPECT_THROW(sample_episode(d.support_pool, d.query_pool, spec), Error);
  spec.ways = 0;
  EXPECT_THROW(sample_episode(d.support_pool, d.query_pool, spec), Error);
}

// Directory datasets --------------------------------------------------------------

void write_class(const fs::path& root, const std::string& name, int images, Rng& rng) {
  fs::create_directories(root / name);
  for (int i = 0; i < images; ++i) {
    write_pnm(root / name / ("img" + std::to_string(i) + ".ppm"), testing::random_image(6, 5, 3, rng));
  }
}

TEST(DirectoryDataset, ManifestDrivesSplitsAndResizes) {
  testing::TempDir dir("dirdata");
  Rng rng(2);
  std::string manifest = "# class split\n";
  for (int c = 0; c < 100; ++c) {
    const std::string name = "c" + std::to_string(c);
    write_class(dir.path, name, 2, rng);
    manifest += name + (c < 64 ? " train\n" : c < 80 ? " val\n" : " test\n");
  }
  std::ofstream(dir.path / "manifest.txt") << manifest;
  DirectoryLoadOptions opts;
  opts.resolution = 8;
  const DatasetSplits d = load_directory_dataset(dir.path, dir.path / "manifest.txt", opts);
  EXPECT_EQ(d.auxiliary.class_set.size(), 64u);
  EXPECT_EQ(d.validation.class_set.size(), 16u);
  EXPECT_EQ(d.support_pool.class_set.size(), 20u);
  EXPECT_EQ(d.auxiliary.examples.size(), 128u);
  EXPECT_EQ(d.support_pool.examples.size(), 20u);
  EXPECT_EQ(d.query_pool.examples.size(), 20u);
  EXPECT_EQ(d.auxiliary.examples[0].image.height(), 8);
  EXPECT_EQ(d.auxiliary.examples[0].image.width(), 8);
}

TEST(DirectoryDataset, GrayscaleImagesBecomeRgb) {
  testing::TempDir dir("gray");
  fs::create_directories(dir.path / "a");
  fs::create_directories(dir.path / "b");
  write_pnm(dir.path / "a" / "x.pgm", ImageTensor(4, 4, 1, 0.5));
  write_pnm(dir.path / "b" / "x.pgm", ImageTensor(4, 4, 1, 0.2));
  write_pnm(dir.path / "b" / "y.pgm", ImageTensor(4, 4, 1, 0.2));
  std::ofstream(dir.path / "m.txt") << "a train\nb test\n";
  DirectoryLoadOptions opts;
  opts.resolution = 4;
  const DatasetSplits d = load_directory_dataset(dir.path, dir.path / "m.txt", opts);
  EXPECT_EQ(d.auxiliary.examples[0].image.channels(), 3);
}

void expect_load_error(const fs::path& root, const std::string& manifest, const std::string& needle) {
  std::ofstream(root / "m.txt") << manifest;
  try {
    load_directory_dataset(root, root / "m.txt");
    FAIL() << "expected a load error mentioning " << needle;
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kLoad);
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TEST(DirectoryDataset, LoadErrorsNameTheOffender) {
  testing::TempDir dir("bad");
  Rng rng(1);
  write_class(dir.path, "good", 2, rng);
  write_class(dir.path, "novel", 2, rng);
  fs::create_directories(dir.path / "hollow");
  expect_load_error(dir.path, "good train\nmissing test\n", "missing");
  expect_load_error(dir.path, "good train\nhollow test\n", "hollow");
  expect_load_error(dir.path, "good train\ngood test\n", "good");
  expect_load_error(dir.path, "good train\nnovel holdout\n", "holdout");
  std::ofstream(dir.path / "novel" / "broken.ppm") << "P6\n4 4\n255\nxx";
  expect_load_error(dir.path, "good train\nnovel test\n", "broken.ppm");
}

}  // namespace
}  // namespace flba
