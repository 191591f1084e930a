#include <gtest/gtest.h>

#include <random>

#include "lungquant/rle.hpp"
#include "test_util.hpp"

using namespace lungquant;

TEST(Rle, EncodesExample) {
  const std::vector<std::uint8_t> px{0, 1, 1, 0, 0, 1, 0, 1, 1, 1};
  const rle::Runs expected{{1, 2}, {5, 1}, {7, 3}};
  EXPECT_EQ(rle::encode(px), expected);
  EXPECT_EQ(rle::decode(expected, 10), px);
  EXPECT_TRUE(rle::encode(std::vector<std::uint8_t>(7, 0)).empty());
  EXPECT_EQ(rle::encode(std::vector<std::uint8_t>(7, 1)), (rle::Runs{{0, 7}}));
}

TEST(Rle, RoundTripRandom) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 200; ++t) {
    const int n = 1 + static_cast<int>(rng() % 300);
    std::bernoulli_distribution on(static_cast<double>(rng() % 100) / 100.0);
    std::vector<std::uint8_t> px(n);
    for (auto& v : px) v = on(rng);
    const auto runs = rle::encode(px);
    EXPECT_EQ(rle::decode(runs, n), px);
    std::int64_t total = 0;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      total += runs[i].second;
      // Adjacent runs never touch, so the encoding is canonical.
      if (i > 0) EXPECT_GT(runs[i].first, runs[i - 1].first + runs[i - 1].second);
    }
    EXPECT_EQ(total, std::count(px.begin(), px.end(), 1));
  }
}

TEST(Rle, RejectsMalformedRuns) {
  EXPECT_THROW(rle::decode({{0, 0}}, 5), rle::Error);
  EXPECT_THROW(rle::decode({{2, 2}, {1, 1}}, 5), rle::Error);
  EXPECT_THROW(rle::decode({{0, 3}, {2, 1}}, 5), rle::Error);
  EXPECT_THROW(rle::decode({{3, 3}}, 5), rle::Error);
  EXPECT_NO_THROW(rle::decode({{0, 2}, {2, 3}}, 5));
}

TEST(Rle, SliceShapesAndVoxels) {
  const Geometry g{{4, 3, 2}, {1, 1, 1}, {0, 0, 0}};
  Grid<int> grid(g, 0);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = static_cast<int>(i);
  const auto z1 = rle::extract_slice(grid, rle::Axis::z, 1);
  ASSERT_EQ(z1.size(), 12u);
  EXPECT_EQ(z1[0], static_cast<int>(g.index(0, 0, 1)));
  EXPECT_EQ(z1[5], static_cast<int>(g.index(1, 1, 1)));
  const auto y2 = rle::extract_slice(grid, rle::Axis::y, 2);
  ASSERT_EQ(y2.size(), 8u);
  EXPECT_EQ(y2[4 + 3], static_cast<int>(g.index(3, 2, 1)));
  const auto x3 = rle::extract_slice(grid, rle::Axis::x, 3);
  ASSERT_EQ(x3.size(), 6u);
  EXPECT_EQ(x3[3 + 2], static_cast<int>(g.index(3, 2, 1)));
  EXPECT_THROW(rle::extract_slice(grid, rle::Axis::z, 2), rle::Error);
  EXPECT_THROW(rle::parse_axis("w"), rle::Error);
}

TEST(Rle, MaskJsonRoundTrip) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 30; ++t) {
    const auto g = lqtest::random_geometry(rng, 12);
    const auto m = lqtest::random_mask(g, 0.3, rng);
    const auto back = rle::mask_from_json(rle::mask_json(m), g);
    EXPECT_TRUE(back == m);
    // Survives a text round trip too.
    EXPECT_TRUE(rle::mask_from_json(nlohmann::json::parse(rle::mask_json(m).dump()), g) == m);
  }
}

TEST(Rle, MaskJsonRejectsMismatches) {
  const Geometry g{{4, 4, 3}, {1, 1, 1}, {0, 0, 0}};
  const auto j = rle::mask_json(LabelMask::binary(g));
  Geometry other = g;
  other.dims[2] = 4;
  EXPECT_THROW(rle::mask_from_json(j, other), GeometryMismatch);
  auto bad = j;
  bad["slices"].erase(0);
  EXPECT_THROW(rle::mask_from_json(bad, g), rle::Error);
  bad = j;
  bad["slices"][0] = {{"a", 1}};
  EXPECT_THROW(rle::mask_from_json(bad, g), rle::Error);
  EXPECT_THROW(rle::mask_from_json(nlohmann::json::array(), g), rle::Error);
}

TEST(Rle, SliceJsonMatchesExtractedPixels) {
  std::mt19937_64 rng(1);
  const Geometry g{{5, 6, 7}, {1, 1, 1}, {0, 0, 0}};
  const auto m = lqtest::random_mask(g, 0.4, rng);
  for (auto axis : {rle::Axis::x, rle::Axis::y, rle::Axis::z}) {
    const auto j = rle::slice_json(m, axis, 2);
    rle::Runs runs;
    for (const auto& r : j["runs"]) runs.push_back({r[0].get<std::int64_t>(), r[1].get<std::int64_t>()});
    const auto px = rle::decode(runs, j["width"].get<std::int64_t>() * j["height"].get<std::int64_t>());
    const auto expected = rle::extract_slice(m, axis, 2);
    ASSERT_EQ(px.size(), expected.size());
    for (std::size_t i = 0; i < px.size(); ++i) EXPECT_EQ(px[i], expected[i] ? 1 : 0);
  }
}
