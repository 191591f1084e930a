#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "lungquant/vbnet.hpp"
#include "naive_ops.hpp"
#include "test_util.hpp"

using namespace lungquant;
using lqtest::random_tensor;

namespace {

VbNetConfig small_config() {
  VbNetConfig c;
  c.levels = 2;
  c.channels = {8, 16};
  c.blocks_per_level = {1, 1};
  return c;
}

double prelu_ref(double v, double slope) { return v > 0 ? v : slope * v; }

Tensor<double> prelu_channels(Tensor<double> x, const Tensor<double>& slope) {
  const std::size_t n = x.size() / x.dim(0);
  for (int c = 0; c < x.dim(0); ++c)
    for (std::size_t i = 0; i < n; ++i) x[c * n + i] = prelu_ref(x[c * n + i], slope[c]);
  return x;
}

Tensor<double> concat_channels(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// Forward pass written directly against the naive convolutions.
Tensor<double> reference_forward(const VbNetConfig& c, const std::map<std::string, Tensor<double>>& p,
                                 const Tensor<double>& input) {
  auto conv = [&](const Tensor<double>& x, const std::string& name, int k, int s) {
    const int pad = k == 3 ? 1 : 0;
    return lqtest::naive_conv(x, p.at(name + ".w"), &p.at(name + ".b"), {s, s, s}, {pad, pad, pad});
  };
  auto block = [&](const Tensor<double>& x, const std::string& name) {
    auto h = prelu_channels(conv(x, name + ".reduce", 1, 1), p.at(name + ".reduce.act"));
    h = prelu_channels(conv(h, name + ".conv", 3, 1), p.at(name + ".conv.act"));
    h = conv(h, name + ".expand", 1, 1);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += x[i];
    return prelu_channels(h, p.at(name + ".out.act"));
  };
  auto x = prelu_channels(conv(input, "in", 3, 1), p.at("in.act"));
  std::vector<Tensor<double>> skips(c.levels);
  for (int l = 0; l < c.levels; ++l) {
    for (int b = 0; b < c.blocks_per_level[l]; ++b) x = block(x, "enc" + std::to_string(l) + ".block" + std::to_string(b));
    if (l + 1 < c.levels) {
      skips[l] = x;
      const auto d = "down" + std::to_string(l);
      x = prelu_channels(conv(x, d, 2, 2), p.at(d + ".act"));
    }
  }
  for (int l = c.levels - 2; l >= 0; --l) {
    const auto u = "up" + std::to_string(l);
    x = lqtest::naive_conv_transpose(x, p.at(u + ".w"), &p.at(u + ".b"), {2, 2, 2}, {0, 0, 0});
    x = concat_channels(prelu_channels(x, p.at(u + ".act")), skips[l]);
    for (int b = 0; b < c.blocks_per_level[l]; ++b) x = block(x, "dec" + std::to_string(l) + ".block" + std::to_string(b));
  }
  x = conv(x, "head", 1, 1);
  for (auto& v : x.data()) v = 1.0 / (1.0 + std::exp(-v));
  return x;
}

// Closed form for one encoder and one decoder block per level, counted from the layer definitions.
std::int64_t closed_form_params(const std::vector<std::int64_t>& C, std::int64_t ratio) {
  const std::size_t L = C.size();
  auto block = [ratio](std::int64_t ch) {
    const std::int64_t r = ch / ratio;
    return (ch * r + r + r) + (27 * r * r + r + r) + (r * ch + ch + ch);
  };
  std::int64_t n = 27 * C[0] + C[0] + C[0];
  for (std::size_t l = 0; l < L; ++l) n += block(C[l]);
  for (std::size_t l = 0; l + 1 < L; ++l) {
    n += 8 * C[l] * C[l + 1] + 2 * C[l + 1];
    const std::int64_t from = l + 2 == L ? C[l + 1] : 2 * C[l + 1];
    n += 8 * from * C[l] + 2 * C[l];
    n += block(2 * C[l]);
  }
  return n + 2 * C[0] + 1;
}

bool bit_equal(const Model& a, const Model& b) {
  if (a.parameters().size() != b.parameters().size()) return false;
  for (const auto& [name, t] : a.parameters()) {
    const auto& u = b.parameters().at(name);
    if (t.shape() != u.shape() || std::memcmp(t.ptr(), u.ptr(), t.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST(VbNetConfig, Validation) {
  VbNetConfig c;
  EXPECT_NO_THROW(c.validate());
  c.levels = 1;
  c.channels = {16};
  c.blocks_per_level = {1};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = VbNetConfig{};
  c.channels = {32, 16, 64};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = VbNetConfig{};
  c.channels = {16, 32};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = VbNetConfig{};
  c.input_channels = 2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = VbNetConfig{};
  c.bottleneck_ratio = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(BottleneckSpec::make(0, 1), std::invalid_argument);
}

TEST(VbNetConfig, JsonRoundTrip) {
  auto c = small_config();
  c.bottleneck_ratio = 2;
  EXPECT_EQ(VbNetConfig::from_json(c.to_json()), c);
  EXPECT_EQ(c.divisor(), 2);
  EXPECT_EQ(VbNetConfig{}.divisor(), 4);
}

TEST(VbNet, BuildIsDeterministicPerSeed) {
  const auto a = build_vbnet(small_config(), 7);
  const auto b = build_vbnet(small_config(), 7);
  const auto c = build_vbnet(small_config(), 8);
  EXPECT_TRUE(bit_equal(a, b));
  EXPECT_FALSE(bit_equal(a, c));
}

TEST(VbNet, ForwardShapeAndRange) {
  const auto net = build_vbnet(small_config(), 3);
  std::mt19937_64 rng(1);
  const auto x = random_tensor({1, 16, 16, 16}, rng).cast<float>();
  const auto y = net.predict(x);
  EXPECT_EQ(y.shape(), x.shape());
  for (float v : y.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(VbNet, ForwardIsBitwiseStable) {
  const auto net = build_vbnet(VbNetConfig{}, 11);
  std::mt19937_64 rng(2);
  const auto x = random_tensor({1, 8, 8, 8}, rng).cast<float>();
  const auto a = net.predict(x), b = net.predict(x);
  EXPECT_EQ(std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(float)), 0);
}

TEST(VbNet, ForwardRejectsIndivisibleDims) {
  const auto net = build_vbnet(VbNetConfig{}, 1);
  EXPECT_THROW(net.predict(Tensor<float>({1, 8, 8, 6})), std::invalid_argument);
  EXPECT_THROW(net.predict(Tensor<float>({2, 8, 8, 8})), std::invalid_argument);
}

TEST(VbNet, ZeroInputAndZeroBiasesGiveHalf) {
  auto net = build_vbnet(VbNetConfig{}, 5);
  for (auto& [name, t] : net.parameters())
    if (name.ends_with(".b")) t.fill(0.0f);
  const auto y = net.predict(Tensor<float>({1, 8, 8, 8}, 0.0f));
  for (float v : y.data()) EXPECT_EQ(v, 0.5f);
}

TEST(VbNet, MatchesNaiveOraclePath) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto net = build_vbnet(VbNetConfig{}, seed);
    std::mt19937_64 rng(seed + 40);
    const auto x = random_tensor({1, 8, 8, 8}, rng);
    std::map<std::string, Tensor<double>> p;
    for (const auto& [name, t] : net.parameters()) p.emplace(name, t.cast<double>());
    const auto ref = reference_forward(net.config(), p, x);
    const auto got = net.predict(x.cast<float>());
    EXPECT_LT(lqtest::max_abs_diff(got.cast<double>(), ref), 1e-5) << "seed " << seed;
  }
}

TEST(VbNet, BridgeAndSkipsAreLive) {
  const auto net = build_vbnet(VbNetConfig{}, 9);
  std::mt19937_64 rng(9);
  const auto x = random_tensor({1, 8, 8, 8}, rng).cast<float>();
  const auto base = net.predict(x).cast<double>();
  ForwardProbe bridge;
  bridge.zero_bridge = true;
  EXPECT_GT(lqtest::max_abs_diff(net.predict(x, bridge).cast<double>(), base), 1e-6);
  for (int level = 0; level < 2; ++level) {
    ForwardProbe skip;
    skip.zero_skip_level = level;
    EXPECT_GT(lqtest::max_abs_diff(net.predict(x, skip).cast<double>(), base), 1e-6) << "level " << level;
  }
}

TEST(ParamCount, DefaultConfigMatchesClosedForm) {
  const VbNetConfig c;
  const auto expected = closed_form_params({16, 32, 64}, 4);
  EXPECT_EQ(param_count(c), expected);
  EXPECT_EQ(static_cast<std::int64_t>(build_vbnet(c, 1).parameter_count()), expected);
  EXPECT_EQ(expected, 69425);
  for (const std::vector<std::int64_t>& C : {std::vector<std::int64_t>{8, 16}, {4, 8, 8, 16}}) {
    VbNetConfig v;
    v.levels = static_cast<int>(C.size());
    v.channels.assign(C.begin(), C.end());
    v.blocks_per_level.assign(C.size(), 1);
    v.bottleneck_ratio = 2;
    EXPECT_EQ(param_count(v), closed_form_params(C, 2));
  }
}

TEST(ParamCount, BlockArithmetic) {
  const auto cmp = compare_plain_block(64, 16);
  EXPECT_EQ(cmp.bottleneck, 64 * 16 + 27 * 16 * 16 + 16 * 64);
  EXPECT_EQ(cmp.bottleneck, 8960);
  EXPECT_EQ(cmp.plain, 110592);
  EXPECT_NEAR(cmp.ratio(), 110592.0 / 8960.0, 1e-12);
  EXPECT_EQ(compare_plain_block(1, 1).bottleneck, 29);
  EXPECT_EQ(compare_plain_block(1, 1).plain, 27);
  for (std::int64_t C = 1; C <= 64; ++C) EXPECT_EQ(compare_plain_block(C, C).bottleneck, 29 * C * C);
}

TEST(ParamCount, PlainVariantCountsOneConvPerBlock) {
  const VbNetConfig c;
  // Each bottleneck (weights, biases, three slopes) becomes a 27C^2 conv with bias and one slope.
  std::int64_t delta = 0;
  for (std::int64_t ch : {16, 32, 64, 32, 64}) {
    const std::int64_t r = ch / 4;
    const std::int64_t bottleneck = ch * r + 27 * r * r + r * ch + (r + r + ch) + (r + r + ch);
    delta += 27 * ch * ch + 2 * ch - bottleneck;
  }
  const auto cmp = compare_plain(c);
  EXPECT_EQ(cmp.bottleneck, 69425);
  EXPECT_EQ(cmp.plain, 69425 + delta);
}

TEST(ParamCount, BottleneckSmallerForRatioAtLeastTwo) {
  for (int ratio = 2; ratio <= 8; ++ratio)
    for (int c0 : {8, 12, 16, 24, 32})
      for (int levels = 2; levels <= 4; ++levels) {
        VbNetConfig c;
        c.levels = levels;
        c.channels.clear();
        for (int l = 0; l < levels; ++l) c.channels.push_back(c0 << l);
        c.blocks_per_level.assign(levels, 1 + (ratio % 2));
        c.bottleneck_ratio = ratio;
        const auto cmp = compare_plain(c);
        EXPECT_LT(cmp.bottleneck, cmp.plain) << "ratio " << ratio << " c0 " << c0 << " levels " << levels;
      }
}

TEST(Segment, ThresholdIsStrict) {
  const Geometry g{{4, 3, 2}, {1, 1, 1}, {0, 0, 0}};
  Grid<float> half(g, 0.5f);
  EXPECT_EQ(threshold_probabilities(half, 0.5).count_nonzero(), 0u);
  Grid<float> pos(g, 1e-6f);
  EXPECT_EQ(threshold_probabilities(pos, 0.0).count_nonzero(), g.voxel_count());
  Grid<float> mixed(g, 0.0f);
  mixed[3] = 0.5000001f;
  mixed[5] = 0.9f;
  const auto m = threshold_probabilities(mixed, 0.5);
  EXPECT_EQ(m.count_nonzero(), 2u);
  EXPECT_EQ(m[3], 1);
  EXPECT_EQ(m[5], 1);
}

TEST(Segment, RejectsThresholdOutsideRange) {
  const auto net = build_vbnet(small_config(), 1);
  Volume v(Geometry{{4, 4, 4}, {1, 1, 1}, {0, 0, 0}}, -800.0f);
  EXPECT_THROW(segment(net, v, 1.0), std::invalid_argument);
  EXPECT_THROW(segment(net, v, -0.1), std::invalid_argument);
  EXPECT_NO_THROW(segment(net, v, 0.0));
}

TEST(Segment, PadsIndivisibleVolumesAndCropsBack) {
  const auto net = build_vbnet(VbNetConfig{}, 4);
  std::mt19937_64 rng(4);
  const Geometry g{{7, 6, 5}, {1, 1, 1}, {0, 0, 0}};
  Volume v(g, 0.0f);
  std::uniform_real_distribution<float> hu(-1000.0f, 100.0f);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = hu(rng);
  const auto prob = predict_probabilities(net, v);
  ASSERT_EQ(prob.geometry(), g);
  const auto padded = pad_reflect(window_tensor(v), {8, 8, 8});
  const auto full = net.predict(padded);
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 7; ++x) EXPECT_EQ(prob.at(x, y, z), full[(z * 8 + y) * 8 + x]);
  const auto mask = segment(net, v, 0.5);
  for (std::size_t i = 0; i < mask.size(); ++i) EXPECT_EQ(mask[i], prob[i] > 0.5f ? 1 : 0);
}

TEST(Segment, PadReflectMirrorsWithoutRepeatingEdge) {
  Tensor<float> x({1, 1, 1, 3}, std::vector<float>{1, 2, 3});
  const auto p = pad_reflect(x, {1, 1, 5});
  EXPECT_EQ(std::vector<float>(p.data().begin(), p.data().end()), (std::vector<float>{1, 2, 3, 2, 1}));
  EXPECT_THROW(pad_reflect(x, {1, 1, 6}), std::invalid_argument);
  EXPECT_THROW(pad_reflect(x, {1, 1, 2}), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  lqtest::TempDir dir;
  auto net = build_vbnet(small_config(), 21);
  net.set_trained_iterations(123);
  save_checkpoint(net, dir / "a.vbn");
  const auto loaded = load_checkpoint(dir / "a.vbn");
  EXPECT_TRUE(bit_equal(net, loaded));
  EXPECT_EQ(loaded.config(), net.config());
  EXPECT_EQ(loaded.trained_iterations(), 123u);
  save_checkpoint(loaded, dir / "b.vbn");
  std::ifstream a(dir / "a.vbn", std::ios::binary), b(dir / "b.vbn", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
  EXPECT_EQ(sa.substr(0, 4), "VBN1");
}

TEST(Checkpoint, CorruptionIsReported) {
  const auto bytes = encode_checkpoint(build_vbnet(small_config(), 2));
  auto code_of = [](const std::vector<std::uint8_t>& b) {
    try {
      decode_checkpoint(b);
    } catch (const CheckpointError& e) {
      return e.code();
    }
    ADD_FAILURE() << "no error";
    return CheckpointError::Code::io;
  };
  using Code = CheckpointError::Code;

  auto truncated = bytes;
  truncated.resize(bytes.size() - 5);
  EXPECT_EQ(code_of(truncated), Code::truncated);

  auto long_length = bytes;
  long_length[8] = 0xff;
  long_length[9] = 0xff;
  EXPECT_EQ(code_of(long_length), Code::truncated);

  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_EQ(code_of(magic), Code::bad_magic);

  auto version = bytes;
  version[4] = 2;
  EXPECT_EQ(code_of(version), Code::version_mismatch);

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_EQ(code_of(trailing), Code::malformed);

  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.vbn"), CheckpointError);
}
