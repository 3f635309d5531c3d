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


#include <algorithm>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "flba/common.hpp"

namespace flba {
namespace {

TEST(Seeds, DeriveSeedIsDeterministicAndTagSensitive) {
  EXPECT_EQ(derive_seed(42, "episode", 3), derive_seed(42, "episode", 3));
  EXPECT_NE(derive_seed(42, "episode", 3), derive_seed(42, "episode", 4));
  EXPECT_NE(derive_seed(42, "episode", 3), derive_seed(42, "perturb", 3));
  EXPECT_NE(derive_seed(42, "episode", 3), derive_seed(43, "episode", 3));
}

TEST(Seeds, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Seeds, Hex64RoundTrips) {
  EXPECT_EQ(hex64(0), "0000000000000000");
  EXPECT_EQ(hex64(0xdeadbeefULL), "00000000deadbeef");
  EXPECT_EQ(std::stoull(hex64(0x0123456789abcdefULL), nullptr, 16), 0x0123456789abcdefULL);
}

TEST(Random, UniformIndexStaysInRangeAndCoversIt) {
  Rng rng(7);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto k = uniform_index(rng, 7);
    ASSERT_LT(k, 7u);
    seen.insert(k);
  }
  EXPECT_EQ(seen.size(), 7u);
  EXPECT_EQ(uniform_index(rng, 0), 0u);
}

TEST(Random, ShuffleIsAPermutation) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> v(1 + trial % 17);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<int>(i);
    shuffle(std::span<int>(v), rng);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < v.size(); ++i) ASSERT_EQ(sorted[i], static_cast<int>(i));
  }
}

TEST(Random, NormalHasRoughlyUnitMoments) {
  Rng rng(11);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = normal(rng);
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.05);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(Errors, CarryKindAndReadableMessage) {
  try {
    fail(ErrorKind::kGeometry, "patch leaves frame");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kGeometry);
    EXPECT_NE(std::string(e.what()).find("patch leaves frame"), std::string::npos);
  }
}

}  // namespace
}  // namespace flba
