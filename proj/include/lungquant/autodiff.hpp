#pragma once

// Tape-based reverse-mode differentiation over the closed operator set used by
// the segmentation network: conv3d, conv3d_transpose, prelu, sigmoid, add,
// channel concat and soft-Dice loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lungquant/tensor.hpp"

namespace lungquant::ad {

/// Handle to a node on a Graph tape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

template <typename T>
class Graph {
 public:
  /// Gradient rule: receives the node's output gradient and accumulates into inputs.
  using BackwardFn = std::function<void(Graph&, const Tensor<T>&)>;

  /// With `record_gradients` off the graph only evaluates (inference mode).
  explicit Graph(bool record_gradients = true) : recording_(record_gradients) {}

  Var input(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, requires_grad && recording_});
    return Var{nodes_.size() - 1};
  }

  /// Appends an operation result. The rule is kept only when some input needs a gradient.
  Var record(Tensor<T> value, std::vector<Var> inputs, BackwardFn rule) {
    bool needs = false;
    for (auto v : inputs) needs = needs || node(v).requires_grad;
    needs = needs && recording_;
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(inputs) : std::vector<Var>{},
                          needs ? std::move(rule) : nullptr, needs});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward pass; zeros when the node was unreachable.
  Tensor<T> grad(Var v) const {
    const auto& n = node(v);
    if (n.grad.empty()) return Tensor<T>(n.value.shape(), T{0});
    return n.grad;
  }

  /// Accumulation buffer for an input's gradient, allocated on first use.
  Tensor<T>& grad_buffer(Var v) {
    auto& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T{0});
    return n.grad;
  }

  /// Reverse sweep from a scalar loss.
  void backward(Var loss) {
    if (value(loss).size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " + value(loss).shape_string());
    backward(loss, Tensor<T>(value(loss).shape(), T{1}));
  }

  /// Reverse sweep seeded with an explicit output gradient.
  void backward(Var out, const Tensor<T>& seed) {
    if (!recording_) throw std::logic_error("backward: graph was built without recording");
    value(out).require_same_shape(seed, "backward seed");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    grad_buffer(out) = seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.rule || n.grad.empty()) continue;
      n.rule(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<Var> inputs;
    BackwardFn rule;
    bool requires_grad = false;
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw std::out_of_range("graph: unknown variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("graph: unknown variable");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  bool recording_;
};

template <typename T>
Var conv3d(Graph<T>& g, Var x, Var w, std::optional<Var> bias, Int3 stride = {1, 1, 1},
           Int3 padding = {0, 0, 0}) {
  auto y = kernels::conv3d_forward(g.value(x), g.value(w), bias ? &g.value(*bias) : nullptr, stride, padding);
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return g.record(std::move(y), inputs, [x, w, bias, stride, padding](Graph<T>& gr, const Tensor<T>& dy) {
    Tensor<T>* dx = gr.requires_grad(x) ? &gr.grad_buffer(x) : nullptr;
    Tensor<T>* dw = gr.requires_grad(w) ? &gr.grad_buffer(w) : nullptr;
    Tensor<T>* db = bias && gr.requires_grad(*bias) ? &gr.grad_buffer(*bias) : nullptr;
    kernels::conv3d_backward(gr.value(x), gr.value(w), dy, stride, padding, dx, dw, db);
  });
}

template <typename T>
Var conv3d_transpose(Graph<T>& g, Var x, Var w, std::optional<Var> bias, Int3 stride = {1, 1, 1},
                     Int3 padding = {0, 0, 0}) {
  auto y = kernels::conv3d_transpose_forward(g.value(x), g.value(w), bias ? &g.value(*bias) : nullptr, stride,
                                             padding);
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return g.record(std::move(y), inputs, [x, w, bias, stride, padding](Graph<T>& gr, const Tensor<T>& dy) {
    Tensor<T>* dx = gr.requires_grad(x) ? &gr.grad_buffer(x) : nullptr;
    Tensor<T>* dw = gr.requires_grad(w) ? &gr.grad_buffer(w) : nullptr;
    Tensor<T>* db = bias && gr.requires_grad(*bias) ? &gr.grad_buffer(*bias) : nullptr;
    kernels::conv3d_transpose_backward(gr.value(x), gr.value(w), dy, stride, padding, dx, dw, db);
  });
}

/// Parametric ReLU with one slope per channel (or a single shared slope).
template <typename T>
Var prelu(Graph<T>& g, Var x, Var slope) {
  const auto& xv = g.value(x);
  const auto& sv = g.value(slope);
  const std::size_t channels = static_cast<std::size_t>(xv.dim(0));
  if (sv.size() != channels && sv.size() != 1)
    throw std::invalid_argument("prelu: slope must have one entry per channel");
  const std::size_t stride = xv.channel_stride();
  auto slope_of = [&sv](std::size_t c) { return sv.size() == 1 ? sv[0] : sv[c]; };
  Tensor<T> y(xv.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    const T a = slope_of(c);
    for (std::size_t i = c * stride; i < (c + 1) * stride; ++i) y[i] = xv[i] > T{0} ? xv[i] : a * xv[i];
  }
  return g.record(std::move(y), {x, slope}, [x, slope, channels, stride](Graph<T>& gr, const Tensor<T>& dy) {
    const auto& xv = gr.value(x);
    const auto& sv = gr.value(slope);
    const bool shared = sv.size() == 1;
    if (gr.requires_grad(x)) {
      auto& dx = gr.grad_buffer(x);
      for (std::size_t c = 0; c < channels; ++c) {
        const T a = shared ? sv[0] : sv[c];
        for (std::size_t i = c * stride; i < (c + 1) * stride; ++i) dx[i] += xv[i] > T{0} ? dy[i] : a * dy[i];
      }
    }
    if (gr.requires_grad(slope)) {
      auto& ds = gr.grad_buffer(slope);
      for (std::size_t c = 0; c < channels; ++c) {
        T s{0};
        for (std::size_t i = c * stride; i < (c + 1) * stride; ++i)
          if (!(xv[i] > T{0})) s += xv[i] * dy[i];
        ds[shared ? 0 : c] += s;
      }
    }
  });
}

template <typename T>
T sigmoid_value(T x) {
  // Split on sign so exp never overflows.
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  const auto& xv = g.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = sigmoid_value(xv[i]);
  const std::size_t self = g.size();
  return g.record(std::move(y), {x}, [x, self](Graph<T>& gr, const Tensor<T>& dy) {
    const auto& yv = gr.value(Var{self});
    auto& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * yv[i] * (T{1} - yv[i]);
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  av.require_same_shape(bv, "add");
  Tensor<T> y = av;
  y += bv;
  return g.record(std::move(y), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& dy) {
    if (gr.requires_grad(a)) gr.grad_buffer(a) += dy;
    if (gr.requires_grad(b)) gr.grad_buffer(b) += dy;
  });
}

/// Stacks a and b along the channel axis.
template <typename T>
Var concat(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  if (av.rank() != bv.rank() ||
      !std::equal(av.shape().begin() + 1, av.shape().end(), bv.shape().begin() + 1))
    throw std::invalid_argument("concat: spatial shape mismatch " + av.shape_string() + " vs " + bv.shape_string());
  auto shape = av.shape();
  shape[0] += bv.dim(0);
  std::vector<T> data;
  data.reserve(av.size() + bv.size());
  data.insert(data.end(), av.data().begin(), av.data().end());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  const std::size_t split = av.size();
  return g.record(Tensor<T>(shape, std::move(data)), {a, b}, [a, b, split](Graph<T>& gr, const Tensor<T>& dy) {
    if (gr.requires_grad(a)) {
      auto& da = gr.grad_buffer(a);
      for (std::size_t i = 0; i < split; ++i) da[i] += dy[i];
    }
    if (gr.requires_grad(b)) {
      auto& db = gr.grad_buffer(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[split + i];
    }
  });
}

inline constexpr double kDefaultDiceSmooth = 1.0;

/// 1 - (2·Σpt + s) / (Σp + Σt + s). Target is treated as a constant.
template <typename T>
Var soft_dice_loss(Graph<T>& g, Var pred, Var target, T smooth = T(kDefaultDiceSmooth)) {
  const auto& p = g.value(pred);
  const auto& t = g.value(target);
  p.require_same_shape(t, "soft_dice_loss");
  double spt = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    spt += static_cast<double>(p[i]) * t[i];
    sp += p[i];
    st += t[i];
  }
  const double num = 2.0 * spt + smooth;
  const double den = sp + st + smooth;
  Tensor<T> loss = Tensor<T>::scalar(static_cast<T>(1.0 - num / den));
  return g.record(std::move(loss), {pred}, [pred, target, num, den](Graph<T>& gr, const Tensor<T>& dy) {
    const auto& t = gr.value(target);
    auto& dp = gr.grad_buffer(pred);
    const double scale = static_cast<double>(dy[0]) / (den * den);
    for (std::size_t i = 0; i < dp.size(); ++i)
      dp[i] += static_cast<T>(-(2.0 * t[i] * den - num) * scale);
  });
}

/// Options for finite-difference gradient checks.
struct GradCheckOptions {
  double eps = 1e-5;
  /// Entries smaller than this fraction of the largest numeric gradient are
  /// compared against that floor instead of their own magnitude.
  double floor_fraction = 1e-3;
  std::uint64_t seed = 0x5eed;
};

namespace detail {

template <typename U, typename Op>
Tensor<U> eval_op(Op& op, const std::vector<Tensor<U>>& inputs, std::vector<Var>* vars_out, Graph<U>& g) {
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.input(t, true));
  Var out = op(g, vars);
  if (vars_out) *vars_out = vars;
  return g.value(out);
}

inline double rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                        double floor_fraction) {
  double scale = 0.0;
  for (double n : numeric) scale = std::max(scale, std::abs(n));
  for (double a : analytic) scale = std::max(scale, std::abs(a));
  const double floor = std::max(scale * floor_fraction, 1e-300);
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double den = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / den);
  }
  return worst;
}

}  // namespace detail

/// Central-difference check of every input gradient of `op`.
///
/// `op` is a callable `(Graph<U>&, const std::vector<Var>&) -> Var`, generic over
/// U so it can be evaluated at two precisions. The output is projected onto a
/// fixed random direction, so non-scalar ops are covered. Analytic gradients
/// come from a Graph<T>; finite differences are always taken in double.
/// Returns the maximum relative error over all input entries.
template <typename T = double, typename Op>
double grad_check(Op&& op, const std::vector<Tensor<double>>& inputs, GradCheckOptions opt = {}) {
  if (!(opt.eps > 0.0 && opt.eps <= 1e-2)) throw std::invalid_argument("grad_check: eps must be in (0, 1e-2]");

  Graph<double> probe(false);
  const Tensor<double> out0 = detail::eval_op(op, inputs, nullptr, probe);
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  Tensor<double> direction(out0.shape());
  for (auto& v : direction.data()) v = uni(rng);

  std::vector<Tensor<T>> typed;
  for (const auto& t : inputs) typed.push_back(t.template cast<T>());
  Graph<T> g(true);
  std::vector<Var> vars;
  for (const auto& t : typed) vars.push_back(g.input(t, true));
  Var out = op(g, vars);
  g.backward(out, direction.template cast<T>());

  std::vector<double> analytic, numeric;
  auto objective = [&](const std::vector<Tensor<double>>& xs) {
    Graph<double> ev(false);
    return dot(detail::eval_op(op, xs, nullptr, ev), direction);
  };
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto gk = g.grad(vars[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = work[k][i];
      work[k][i] = orig + opt.eps;
      const double fp = objective(work);
      work[k][i] = orig - opt.eps;
      const double fm = objective(work);
      work[k][i] = orig;
      numeric.push_back((fp - fm) / (2.0 * opt.eps));
      analytic.push_back(static_cast<double>(gk[i]));
    }
  }
  return detail::rel_error(analytic, numeric, opt.floor_fraction);
}

}  // namespace lungquant::ad
