#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "lungquant/autodiff.hpp"
#include "lungquant/vbnet.hpp"

using namespace lungquant;
using ad::Graph;
using ad::Var;

namespace {

Tensor<double> random_tensor(const std::vector<int>& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Moves entries away from zero so finite differences never straddle a PReLU kink.
Tensor<double> away_from_zero(Tensor<double> t, double margin) {
  for (auto& v : t.data())
    if (std::abs(v) < margin) v = v < 0 ? -margin : margin;
  return t;
}

constexpr int kSeeds = 20;
constexpr double kDoubleTol = 1e-6;
constexpr double kSingleTol = 1e-4;

template <typename Op, typename Make>
void check_both_precisions(Op op, Make make_inputs) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    const auto inputs = make_inputs(rng);
    ad::GradCheckOptions opt;
    opt.seed = static_cast<std::uint64_t>(seed);
    EXPECT_LT(ad::grad_check<double>(op, inputs, opt), kDoubleTol) << "double, seed " << seed;
    EXPECT_LT(ad::grad_check<float>(op, inputs, opt), kSingleTol) << "float, seed " << seed;
  }
}

}  // namespace

TEST(GradCheck, Conv3dWithBiasStrideAndPadding) {
  for (int stride : {1, 2}) {
    check_both_precisions(
        [stride](auto& g, const std::vector<Var>& v) {
          return ad::conv3d(g, v[0], v[1], v[2], Int3{stride, stride, stride}, Int3{1, 1, 1});
        },
        [](std::mt19937_64& rng) {
          return std::vector{random_tensor({2, 4, 4, 4}, rng), random_tensor({3, 2, 3, 3, 3}, rng),
                             random_tensor({3}, rng)};
        });
  }
}

TEST(GradCheck, Conv3dPointwise) {
  check_both_precisions(
      [](auto& g, const std::vector<Var>& v) { return ad::conv3d(g, v[0], v[1], v[2]); },
      [](std::mt19937_64& rng) {
        return std::vector{random_tensor({3, 4, 4, 4}, rng), random_tensor({2, 3, 1, 1, 1}, rng),
                           random_tensor({2}, rng)};
      });
}

TEST(GradCheck, Conv3dTranspose) {
  check_both_precisions(
      [](auto& g, const std::vector<Var>& v) {
        return ad::conv3d_transpose(g, v[0], v[1], v[2], Int3{2, 2, 2}, Int3{0, 0, 0});
      },
      [](std::mt19937_64& rng) {
        return std::vector{random_tensor({3, 4, 4, 4}, rng), random_tensor({3, 2, 2, 2, 2}, rng),
                           random_tensor({2}, rng)};
      });
}

TEST(GradCheck, PRelu) {
  check_both_precisions([](auto& g, const std::vector<Var>& v) { return ad::prelu(g, v[0], v[1]); },
                        [](std::mt19937_64& rng) {
                          return std::vector{away_from_zero(random_tensor({3, 4, 4, 4}, rng), 0.05),
                                             random_tensor({3}, rng, 0.0, 0.5)};
                        });
}

TEST(GradCheck, Sigmoid) {
  check_both_precisions([](auto& g, const std::vector<Var>& v) { return ad::sigmoid(g, v[0]); },
                        [](std::mt19937_64& rng) { return std::vector{random_tensor({2, 4, 4, 4}, rng, -4.0, 4.0)}; });
}

TEST(GradCheck, Add) {
  check_both_precisions([](auto& g, const std::vector<Var>& v) { return ad::add(g, v[0], v[1]); },
                        [](std::mt19937_64& rng) {
                          return std::vector{random_tensor({2, 4, 4, 4}, rng), random_tensor({2, 4, 4, 4}, rng)};
                        });
}

TEST(GradCheck, ConcatChannels) {
  check_both_precisions([](auto& g, const std::vector<Var>& v) { return ad::concat(g, v[0], v[1]); },
                        [](std::mt19937_64& rng) {
                          return std::vector{random_tensor({2, 4, 4, 4}, rng), random_tensor({3, 4, 4, 4}, rng)};
                        });
}

TEST(GradCheck, SoftDiceLoss) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(77 + seed);
    auto target = random_tensor({1, 4, 4, 4}, rng, 0.0, 1.0);
    for (auto& v : target.data()) v = v > 0.6 ? 1.0 : 0.0;
    auto op = [&target](auto& g, const std::vector<Var>& v) {
      using U = typename std::decay_t<decltype(g.value(v[0]))>::value_type;
      return ad::soft_dice_loss(g, v[0], g.input(target.template cast<U>(), false));
    };
    const std::vector inputs{random_tensor({1, 4, 4, 4}, rng, 0.0, 1.0)};
    ad::GradCheckOptions opt;
    opt.seed = static_cast<std::uint64_t>(seed);
    EXPECT_LT(ad::grad_check<double>(op, inputs, opt), kDoubleTol) << "seed " << seed;
    EXPECT_LT(ad::grad_check<float>(op, inputs, opt), kSingleTol) << "seed " << seed;
  }
}

TEST(GradCheck, ComposedConvPreluDiceToy) {
  std::mt19937_64 rng(3);
  auto target = random_tensor({1, 4, 4, 4}, rng, 0.0, 1.0);
  for (auto& v : target.data()) v = v > 0.5 ? 1.0 : 0.0;
  auto op = [&target](auto& g, const std::vector<Var>& v) {
    using U = typename std::decay_t<decltype(g.value(v[0]))>::value_type;
    auto h = ad::prelu(g, ad::conv3d(g, v[0], v[1], v[2], Int3{1, 1, 1}, Int3{1, 1, 1}), v[3]);
    auto p = ad::sigmoid(g, ad::conv3d(g, h, v[4], v[5]));
    return ad::soft_dice_loss(g, p, g.input(target.template cast<U>(), false));
  };
  const std::vector inputs{random_tensor({1, 4, 4, 4}, rng), random_tensor({2, 1, 3, 3, 3}, rng),
                           random_tensor({2}, rng),          random_tensor({2}, rng, 0.0, 0.5),
                           random_tensor({1, 2, 1, 1, 1}, rng), random_tensor({1}, rng)};
  EXPECT_LT(ad::grad_check(op, inputs), 1e-5);
}

TEST(GradCheck, IdentityOpHasZeroError) {
  std::mt19937_64 rng(2);
  auto op = [](auto&, const std::vector<Var>& v) { return v[0]; };
  EXPECT_NEAR(ad::grad_check(op, {random_tensor({1, 4, 4, 4}, rng)}), 0.0, 1e-9);
}

TEST(Autodiff, SigmoidOfLogThreeIsThreeQuarters) {
  EXPECT_NEAR(ad::sigmoid_value(std::log(3.0)), 0.75, 1e-15);
}

TEST(Autodiff, SoftDiceValues) {
  Graph<double> g;
  Tensor<double> t({1, 2, 2, 2}, 0.0);
  const int n = 3;
  for (int i = 0; i < n; ++i) t[i] = 1.0;
  auto tv = g.input(t, false);
  auto zero = g.input(Tensor<double>(t.shape(), 0.0), true);
  EXPECT_NEAR(g.value(ad::soft_dice_loss(g, zero, tv))[0], 1.0 - 1.0 / (n + 1), 1e-15);
  auto same = g.input(t, true);
  EXPECT_NEAR(g.value(ad::soft_dice_loss(g, same, tv, 0.5))[0], 0.0, 1e-15);
}

TEST(Autodiff, SoftDiceIsSymmetricOnBinaryInputs) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor({1, 4, 4, 4}, rng, 0.0, 1.0);
    auto b = random_tensor({1, 4, 4, 4}, rng, 0.0, 1.0);
    for (auto& v : a.data()) v = v > 0.5 ? 1.0 : 0.0;
    for (auto& v : b.data()) v = v > 0.3 ? 1.0 : 0.0;
    Graph<double> g(false);
    const double ab = g.value(ad::soft_dice_loss(g, g.input(a), g.input(b)))[0];
    const double ba = g.value(ad::soft_dice_loss(g, g.input(b), g.input(a)))[0];
    EXPECT_DOUBLE_EQ(ab, ba);
    EXPECT_GE(ab, 0.0);
    EXPECT_LT(ab, 1.0);
  }
}

TEST(Autodiff, SoftDiceRejectsShapeMismatch) {
  Graph<double> g;
  auto p = g.input(Tensor<double>({1, 2, 2, 2}, 0.5), true);
  auto t = g.input(Tensor<double>({1, 2, 2, 3}, 1.0), false);
  EXPECT_THROW(ad::soft_dice_loss(g, p, t), std::invalid_argument);
}

TEST(Autodiff, BackwardRequiresScalarLoss) {
  Graph<double> g;
  auto x = g.input(Tensor<double>({1, 2, 2, 2}, 1.0), true);
  EXPECT_THROW(g.backward(ad::sigmoid(g, x)), std::invalid_argument);
}

TEST(Autodiff, UnreachableParameterGetsZeroGradient) {
  Graph<double> g;
  auto x = g.input(Tensor<double>({1, 2, 2, 2}, 0.3), true);
  auto unused = g.input(Tensor<double>({3}, 1.0), true);
  auto t = g.input(Tensor<double>({1, 2, 2, 2}, 1.0), false);
  g.backward(ad::soft_dice_loss(g, ad::sigmoid(g, x), t));
  const auto du = g.grad(unused);
  ASSERT_EQ(du.size(), 3u);
  for (double v : du.data()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, LinearNodeGradientIsInput) {
  Graph<double> g;
  Tensor<double> x({1, 1, 1, 1}, 3.5);
  Tensor<double> w({1, 1, 1, 1, 1}, -2.0);
  auto xv = g.input(x, false);
  auto wv = g.input(w, true);
  auto y = ad::conv3d(g, xv, wv, std::nullopt);
  EXPECT_DOUBLE_EQ(g.value(y)[0], -7.0);
  g.backward(y);
  EXPECT_DOUBLE_EQ(g.grad(wv)[0], 3.5);
}

TEST(Autodiff, ZeroSeedGivesZeroGradients) {
  std::mt19937_64 rng(1);
  Graph<double> g;
  auto x = g.input(random_tensor({2, 4, 4, 4}, rng), true);
  auto w = g.input(random_tensor({2, 2, 3, 3, 3}, rng), true);
  auto y = ad::sigmoid(g, ad::conv3d(g, x, w, std::nullopt, Int3{1, 1, 1}, Int3{1, 1, 1}));
  g.backward(y, Tensor<double>(g.value(y).shape(), 0.0));
  const auto dx = g.grad(x), dw = g.grad(w);
  for (double v : dx.data()) EXPECT_EQ(v, 0.0);
  for (double v : dw.data()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, SharedInputAccumulatesGradient) {
  Graph<double> g;
  Tensor<double> x({1, 2, 2, 2}, 0.7);
  auto xv = g.input(x, true);
  auto y = ad::add(g, xv, xv);
  g.backward(y, Tensor<double>(g.value(y).shape(), 1.0));
  const auto dx = g.grad(xv);
  for (double v : dx.data()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Autodiff, NonRecordingGraphRejectsBackward) {
  Graph<double> g(false);
  auto x = g.input(Tensor<double>({1, 2, 2, 2}, 1.0), true);
  auto y = ad::sigmoid(g, x);
  EXPECT_ANY_THROW(g.backward(y, Tensor<double>(g.value(y).shape(), 1.0)));
}

TEST(Autodiff, SigmoidIsStableForLargeInputs) {
  EXPECT_EQ(ad::sigmoid_value(1000.0), 1.0);
  EXPECT_EQ(ad::sigmoid_value(-1000.0), 0.0);
  EXPECT_NEAR(ad::sigmoid_value(0.0), 0.5, 1e-15);
}

TEST(Autodiff, GradCheckDetectsWrongGradient) {
  // A deliberately broken op: forward is 2x, backward claims 3x.
  auto op = [](auto& g, const std::vector<Var>& v) {
    using U = typename std::decay_t<decltype(g.value(v[0]))>::value_type;
    auto y = g.value(v[0]);
    for (auto& e : y.data()) e *= U(2);
    const Var x = v[0];
    return g.record(std::move(y), {x}, [x](auto& gr, const Tensor<U>& dy) {
      auto& dx = gr.grad_buffer(x);
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += U(3) * dy[i];
    });
  };
  std::mt19937_64 rng(9);
  EXPECT_GT(ad::grad_check(op, {random_tensor({1, 2, 2, 2}, rng)}), 1e-2);
  EXPECT_THROW(ad::grad_check(op, {random_tensor({1, 2, 2, 2}, rng)}, {.eps = 0.5}), std::invalid_argument);
}

namespace {

VbNetConfig toy_two_level() {
  VbNetConfig c;
  c.levels = 2;
  c.channels = {2, 4};
  c.blocks_per_level = {1, 1};
  c.bottleneck_ratio = 2;
  return c;
}

}  // namespace

// Smallest |value| over every recorded (non-leaf) node; PReLU inputs are among them.
template <typename Op>
double min_abs_intermediate(Op& op, const std::vector<Tensor<double>>& inputs) {
  Graph<double> g(false);
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.input(t, true));
  const std::size_t first = g.size();
  op(g, vars);
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = first; i < g.size(); ++i)
    for (double v : g.value(Var{i}).data()) m = std::min(m, std::abs(v));
  return m;
}

// Every parameter and the input are perturbed; the output map is projected onto a random direction.
// Draws with an activation within kKinkMargin of a PReLU kink are skipped, since the
// network is not differentiable there and central differences would straddle the kink.
template <typename T>
void check_full_network(double tol) {
  constexpr double kKinkMargin = 1e-4;
  const auto config = toy_two_level();
  int checked = 0;
  for (int seed = 0; checked < kSeeds; ++seed) {
    ASSERT_LT(seed, 10 * kSeeds) << "too many draws land near a kink";
    const auto net = VbNet<double>::build(config, static_cast<std::uint64_t>(seed));
    std::vector<std::string> names;
    std::vector<Tensor<double>> inputs;
    std::mt19937_64 rng(500 + seed);
    inputs.push_back(random_tensor({1, 4, 4, 4}, rng));
    for (const auto& [name, t] : net.parameters()) {
      names.push_back(name);
      inputs.push_back(t);
    }
    auto op = [&](auto& g, const std::vector<Var>& v) {
      using U = typename std::decay_t<decltype(g.value(v[0]))>::value_type;
      const auto typed = net.template cast<U>();
      typename VbNet<U>::Bound bound;
      for (std::size_t i = 0; i < names.size(); ++i) bound.emplace(names[i], v[i + 1]);
      return typed.forward(g, bound, v[0]);
    };
    if (min_abs_intermediate(op, inputs) < kKinkMargin) continue;
    ad::GradCheckOptions opt;
    opt.seed = static_cast<std::uint64_t>(seed);
    EXPECT_LT(ad::grad_check<T>(op, inputs, opt), tol) << "seed " << seed;
    ++checked;
  }
}

TEST(GradCheck, FullTwoLevelVbNetDouble) { check_full_network<double>(kDoubleTol); }

TEST(GradCheck, FullTwoLevelVbNetSingle) { check_full_network<float>(kSingleTol); }
