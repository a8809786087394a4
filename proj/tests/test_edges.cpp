#include "sketch3d/edges.hpp"

#include <gtest/gtest.h>

#include <random>
#include <set>

using namespace sketch3d;

TEST(ExtractEdges, ConstantImageHasNoEdges) {
  for (double v : {0.0, 0.4, 1.0}) {
    const auto r = extract_edges(Image(20, 16, 3, v));
    EXPECT_TRUE(r.points.empty());
    for (auto m : r.sketch.data) EXPECT_EQ(m, 0);
  }
}

TEST(ExtractEdges, VerticalStepLandsOnAdjacentColumns) {
  for (int k : {5, 10, 17}) {
    Image img(24, 20, 3, 0.0);
    for (int y = 0; y < 20; ++y)
      for (int x = k; x < 24; ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = 1.0;
    const auto r = extract_edges(img);
    ASSERT_FALSE(r.points.empty());
    std::set<int> cols;
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 24; ++x)
        if (r.sketch.at(y, x)) cols.insert(x);
    for (int c : cols) EXPECT_TRUE(c == k - 1 || c == k) << "column " << c << " for step at " << k;
  }
}

TEST(ExtractEdges, BinaryOutputAndNormalizedPoints) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  Image img(40, 30, 3);
  for (auto& v : img.data) v = u(rng);
  const auto r = extract_edges(img);
  std::size_t on = 0;
  for (auto m : r.sketch.data) {
    EXPECT_TRUE(m == 0 || m == 1);
    on += m;
  }
  EXPECT_EQ(on, r.points.size());
  for (const auto& p : r.points.points) {
    EXPECT_GE(p.minCoeff(), 0.0);
    EXPECT_LE(p.maxCoeff(), 1.0);
  }
}

TEST(ExtractEdges, ThinningLeavesOnePixelLines) {
  // A wide ramp produces a thick gradient band; thinning must strip it to a
  // line with no 2x2 blocks of stroke pixels.
  Image img(40, 40, 1, 0.0);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) img.at(y, x, 0) = std::clamp((x - 15) / 10.0, 0.0, 1.0);
  const auto r = extract_edges(img);
  ASSERT_FALSE(r.points.empty());
  for (int y = 0; y + 1 < 40; ++y)
    for (int x = 0; x + 1 < 40; ++x)
      EXPECT_FALSE(r.sketch.at(y, x) && r.sketch.at(y, x + 1) && r.sketch.at(y + 1, x) &&
                   r.sketch.at(y + 1, x + 1));
}

TEST(ExtractEdges, RejectsNonFinite) {
  Image img(8, 8, 3, 0.5);
  img.data[5] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(extract_edges(img), InvalidArgument);
}
