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


#include <gtest/gtest.h>

#include "test_support.hpp"

namespace flba {
namespace {

TEST(Image, ConstructionValidatesRangeAndShape) {
  EXPECT_THROW(ImageTensor(0, 2, 3), Error);
  EXPECT_THROW(ImageTensor(2, 2, 1, 1.5), Error);
  EXPECT_THROW(ImageTensor(1, 2, 1, std::vector<double>{0.1}), Error);
  EXPECT_THROW(ImageTensor(1, 1, 1, std::vector<double>{-0.1}), Error);
  ImageTensor img(2, 3, 3, 0.25);
  EXPECT_EQ(img.size(), 18u);
  EXPECT_DOUBLE_EQ(img(1, 2, 2), 0.25);
}

TEST(Image, InterleavedLayout) {
  ImageTensor img(2, 2, 3);
  img(1, 0, 2) = 0.5;
  EXPECT_DOUBLE_EQ(img.pixels()[(1 * 2 + 0) * 3 + 2], 0.5);
}

TEST(Image, DistancesAndClip) {
  ImageTensor a(1, 2, 1, std::vector<double>{0.1, 0.5});
  ImageTensor b(1, 2, 1, std::vector<double>{0.4, 0.5});
  EXPECT_NEAR(linf_distance(a, b), 0.3, 1e-15);
  EXPECT_NEAR(mean_abs_distance(a, b), 0.15, 1e-15);
  EXPECT_THROW(linf_distance(a, ImageTensor(2, 1, 1)), Error);
  a.mutable_pixels()[0] = 1.7;
  a.clip();
  EXPECT_DOUBLE_EQ(a.pixels()[0], 1.0);
}

TEST(Image, ResizeIdentityAndConstantPreserving) {
  Rng rng(1);
  const ImageTensor img = testing::random_image(5, 7, 3, rng);
  EXPECT_EQ(resize_bilinear(img, 5, 7), img);
  const ImageTensor flat(6, 6, 3, 0.3);
  const ImageTensor r = resize_bilinear(flat, 4, 9);
  for (double v : r.pixels()) EXPECT_NEAR(v, 0.3, 1e-12);
}

TEST(ImageIo, PnmRoundTripIsExactOnTheByteGrid) {
  testing::TempDir dir("pnm");
  ImageTensor img(3, 4, 3);
  Rng rng(5);
  for (double& v : img.mutable_pixels()) v = static_cast<double>(uniform_index(rng, 256)) / 255.0;
  write_pnm(dir.path / "a.ppm", img);
  const ImageTensor back = read_image(dir.path / "a.ppm");
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back.pixels()[i], img.pixels()[i], 1e-12);
}

TEST(ImageIo, PngRoundTripIsExactOnTheByteGrid) {
  testing::TempDir dir("png");
  ImageTensor img(5, 3, 3);
  Rng rng(6);
  for (double& v : img.mutable_pixels()) v = static_cast<double>(uniform_index(rng, 256)) / 255.0;
  write_png(dir.path / "a.png", img);
  const ImageTensor back = read_image(dir.path / "a.png");
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back.pixels()[i], img.pixels()[i], 1e-12);
}

TEST(ImageIo, AsciiPnmAndErrors) {
  const ImageTensor g = decode_pnm("P2\n# comment\n2 1\n4\n0 4\n", "mem");
  EXPECT_EQ(g.channels(), 1);
  EXPECT_DOUBLE_EQ(g.pixels()[1], 1.0);
  EXPECT_THROW(decode_pnm("P7\n", "mem"), Error);
  EXPECT_THROW(decode_pnm("P2\n2 1\n4\n0 9\n", "mem"), Error);
  EXPECT_THROW(decode_pnm("P5\n4 4\n255\nab", "mem"), Error);
  EXPECT_THROW(decode_png("\x89PNG\r\n\x1a\nxx", "mem"), Error);
  EXPECT_THROW(read_image("/nonexistent/file.png"), Error);
}

TEST(Resize, DownsampleAveragesNeighbours) {
  ImageTensor img(2, 2, 1, std::vector<double>{0.0, 1.0, 1.0, 0.0});
  const ImageTensor r = resize_bilinear(img, 1, 1);
  EXPECT_NEAR(r.pixels()[0], 0.5, 1e-12);
}

TEST(Resize, OutputStaysInUnitRange) {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const ImageTensor img = testing::random_image(3 + t % 5, 4 + t % 3, 3, rng);
    const ImageTensor r = resize_bilinear(img, 7, 5);
    for (double v : r.pixels()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

}  // namespace
}  // namespace flba
