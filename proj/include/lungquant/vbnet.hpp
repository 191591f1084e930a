#pragma once

// V-shaped encoder/decoder with bottleneck residual blocks, single-channel
// sigmoid head. Parameters live in a name-keyed map; the forward pass is
// recorded on an autodiff Graph so the same code serves training and inference.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lungquant/autodiff.hpp"
#include "lungquant/grid.hpp"
#include "lungquant/tensor.hpp"
#include "lungquant/volume_io.hpp"

namespace lungquant {

/// Channel layout of one bottleneck block: 1x1x1 reduce, 3x3x3, 1x1x1 restore.
struct BottleneckSpec {
  int channels = 0;
  int reduced = 0;
  bool residual = true;

  static BottleneckSpec make(int channels, int ratio, bool residual = true) {
    BottleneckSpec s{channels, std::max(1, channels / std::max(1, ratio)), residual};
    s.validate();
    return s;
  }
  void validate() const {
    if (reduced < 1 || reduced > channels) throw std::invalid_argument("bottleneck: need 1 <= reduced <= channels");
  }
};

struct VbNetConfig {
  int levels = 3;
  std::vector<int> channels{16, 32, 64};
  /// Bottleneck blocks at each level, used on both the contracting and expansive side.
  std::vector<int> blocks_per_level{1, 1, 1};
  int bottleneck_ratio = 4;
  int input_channels = 1;
  int output_channels = 1;
  bool residual = true;

  void validate() const {
    if (levels < 2) throw std::invalid_argument("vbnet config: levels must be >= 2");
    if (static_cast<int>(channels.size()) != levels)
      throw std::invalid_argument("vbnet config: channels must list one entry per level");
    if (static_cast<int>(blocks_per_level.size()) != levels)
      throw std::invalid_argument("vbnet config: blocks_per_level must list one entry per level");
    for (int l = 0; l < levels; ++l) {
      if (channels[l] < 1) throw std::invalid_argument("vbnet config: channels must be positive");
      if (l > 0 && channels[l] < channels[l - 1])
        throw std::invalid_argument("vbnet config: channels must be non-decreasing with depth");
      if (blocks_per_level[l] < 0) throw std::invalid_argument("vbnet config: negative block count");
    }
    if (bottleneck_ratio < 1) throw std::invalid_argument("vbnet config: bottleneck_ratio must be >= 1");
    if (input_channels != 1 || output_channels != 1)
      throw std::invalid_argument("vbnet config: only single-channel input and output are supported");
  }

  /// Spatial dims must be multiples of this.
  int divisor() const { return 1 << (levels - 1); }

  nlohmann::json to_json() const {
    return {{"levels", levels},
            {"channels", channels},
            {"blocks_per_level", blocks_per_level},
            {"bottleneck_ratio", bottleneck_ratio},
            {"input_channels", input_channels},
            {"output_channels", output_channels},
            {"residual", residual}};
  }
  static VbNetConfig from_json(const nlohmann::json& j) {
    VbNetConfig c;
    c.levels = j.value("levels", c.levels);
    c.channels = j.value("channels", c.channels);
    c.blocks_per_level = j.value("blocks_per_level", std::vector<int>(c.levels, 1));
    c.bottleneck_ratio = j.value("bottleneck_ratio", c.bottleneck_ratio);
    c.input_channels = j.value("input_channels", 1);
    c.output_channels = j.value("output_channels", 1);
    c.residual = j.value("residual", true);
    c.validate();
    return c;
  }
  bool operator==(const VbNetConfig&) const = default;
};

/// Knobs for perturbation experiments on information flow.
struct ForwardProbe {
  bool zero_bridge = false;
  /// Level whose skip tensor is replaced by zeros, -1 for none.
  int zero_skip_level = -1;
};

namespace detail {

/// Platform-independent uniform draw in [-bound, bound).
inline double uniform_pm(std::mt19937_64& rng, double bound) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return (2.0 * u - 1.0) * bound;
}

}  // namespace detail

template <typename T>
class VbNet {
 public:
  using Params = std::map<std::string, Tensor<T>>;
  using Bound = std::map<std::string, ad::Var>;

  VbNet() = default;
  VbNet(VbNetConfig config, Params params, std::uint64_t trained_iterations = 0)
      : config_(std::move(config)), params_(std::move(params)), trained_iterations_(trained_iterations) {
    config_.validate();
    const auto expected = parameter_shapes(config_);
    if (expected.size() != params_.size()) throw std::invalid_argument("vbnet: parameter set does not match config");
    for (const auto& [name, shape] : expected) {
      auto it = params_.find(name);
      if (it == params_.end()) throw std::invalid_argument("vbnet: missing parameter " + name);
      if (it->second.shape() != shape) throw std::invalid_argument("vbnet: bad shape for " + name);
    }
  }

  /// Fresh network with He-uniform weights, zero biases and PReLU slopes of 0.25.
  static VbNet build(const VbNetConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    Params params;
    for (const auto& [name, shape] : parameter_shapes(config)) {
      Tensor<T> t(shape, T{0});
      if (is_slope(name)) {
        t.fill(T(0.25));
      } else if (shape.size() == 5) {
        const double fan_in = is_transposed(name)
                                  ? static_cast<double>(shape[0]) * shape[2] * shape[3] * shape[4] / 8.0
                                  : static_cast<double>(shape[1]) * shape[2] * shape[3] * shape[4];
        const double bound = std::sqrt(6.0 / std::max(1.0, fan_in));
        for (auto& v : t.data()) v = static_cast<T>(detail::uniform_pm(rng, bound));
      }
      params.emplace(name, std::move(t));
    }
    return VbNet(config, std::move(params));
  }

  /// Names and shapes of every parameter implied by `config`, in build order.
  static std::vector<std::pair<std::string, std::vector<int>>> parameter_shapes(const VbNetConfig& c) {
    std::vector<std::pair<std::string, std::vector<int>>> out;
    auto conv = [&](const std::string& p, int cout, int cin, int k) {
      out.push_back({p + ".w", {cout, cin, k, k, k}});
      out.push_back({p + ".b", {cout}});
    };
    auto block = [&](const std::string& p, int ch) {
      const auto s = BottleneckSpec::make(ch, c.bottleneck_ratio, c.residual);
      conv(p + ".reduce", s.reduced, ch, 1);
      out.push_back({p + ".reduce.act", {s.reduced}});
      conv(p + ".conv", s.reduced, s.reduced, 3);
      out.push_back({p + ".conv.act", {s.reduced}});
      conv(p + ".expand", ch, s.reduced, 1);
      out.push_back({p + ".out.act", {ch}});
    };
    const auto& C = c.channels;
    conv("in", C[0], c.input_channels, 3);
    out.push_back({"in.act", {C[0]}});
    for (int l = 0; l < c.levels; ++l) {
      for (int b = 0; b < c.blocks_per_level[l]; ++b) block(block_name("enc", l, b), C[l]);
      if (l + 1 < c.levels) {
        conv("down" + std::to_string(l), C[l + 1], C[l], 2);
        out.push_back({"down" + std::to_string(l) + ".act", {C[l + 1]}});
      }
    }
    for (int l = c.levels - 2; l >= 0; --l) {
      const std::string up = "up" + std::to_string(l);
      const int from = l + 2 == c.levels ? C[l + 1] : 2 * C[l + 1];
      out.push_back({up + ".w", {from, C[l], 2, 2, 2}});
      out.push_back({up + ".b", {C[l]}});
      out.push_back({up + ".act", {C[l]}});
      for (int b = 0; b < c.blocks_per_level[l]; ++b) block(block_name("dec", l, b), 2 * C[l]);
    }
    conv("head", c.output_channels, 2 * C[0], 1);
    return out;
  }

  static std::string block_name(const char* side, int level, int block) {
    return std::string(side) + std::to_string(level) + ".block" + std::to_string(block);
  }

  const VbNetConfig& config() const { return config_; }
  const Params& parameters() const { return params_; }
  Params& parameters() { return params_; }
  std::uint64_t trained_iterations() const { return trained_iterations_; }
  void set_trained_iterations(std::uint64_t n) { trained_iterations_ = n; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  template <typename U>
  VbNet<U> cast() const {
    typename VbNet<U>::Params p;
    for (const auto& [name, t] : params_) p.emplace(name, t.template cast<U>());
    return VbNet<U>(config_, std::move(p), trained_iterations_);
  }

  /// Places every parameter on the graph as a leaf.
  Bound bind(ad::Graph<T>& g, bool requires_grad) const {
    Bound b;
    for (const auto& [name, t] : params_) b.emplace(name, g.input(t, requires_grad));
    return b;
  }

  /// Records the network on `g`. `input` is (1, D, H, W) with each spatial dim
  /// divisible by config().divisor(); the result is a (1, D, H, W) probability map.
  ad::Var forward(ad::Graph<T>& g, const Bound& p, ad::Var input, const ForwardProbe& probe = {}) const {
    const auto& shape = g.value(input).shape();
    if (shape.size() != 4 || shape[0] != config_.input_channels)
      throw std::invalid_argument("vbnet forward: expected (1, D, H, W) input");
    for (int a = 1; a < 4; ++a)
      if (shape[a] % config_.divisor() != 0)
        throw std::invalid_argument("vbnet forward: spatial dims must be divisible by " +
                                    std::to_string(config_.divisor()) + " (pad the input)");

    auto P = [&p](const std::string& name) { return p.at(name); };
    auto conv = [&](ad::Var x, const std::string& name, int k, int stride) {
      const int pad = k == 3 ? 1 : 0;
      return ad::conv3d(g, x, P(name + ".w"), P(name + ".b"), Int3{stride, stride, stride}, Int3{pad, pad, pad});
    };
    auto block = [&](ad::Var x, const std::string& name) {
      auto h = ad::prelu(g, conv(x, name + ".reduce", 1, 1), P(name + ".reduce.act"));
      h = ad::prelu(g, conv(h, name + ".conv", 3, 1), P(name + ".conv.act"));
      h = conv(h, name + ".expand", 1, 1);
      if (config_.residual) h = ad::add(g, h, x);
      return ad::prelu(g, h, P(name + ".out.act"));
    };
    auto zeros_like = [&g](ad::Var v) { return g.input(Tensor<T>(g.value(v).shape(), T{0}), false); };

    const int L = config_.levels;
    std::vector<ad::Var> skips(L);
    ad::Var x = ad::prelu(g, conv(input, "in", 3, 1), P("in.act"));
    for (int l = 0; l < L; ++l) {
      for (int b = 0; b < config_.blocks_per_level[l]; ++b) x = block(x, block_name("enc", l, b));
      if (l + 1 < L) {
        skips[l] = probe.zero_skip_level == l ? zeros_like(x) : x;
        const std::string d = "down" + std::to_string(l);
        x = ad::prelu(g, conv(x, d, 2, 2), P(d + ".act"));
      }
    }
    if (probe.zero_bridge) x = zeros_like(x);
    for (int l = L - 2; l >= 0; --l) {
      const std::string up = "up" + std::to_string(l);
      x = ad::conv3d_transpose(g, x, P(up + ".w"), P(up + ".b"), Int3{2, 2, 2}, Int3{0, 0, 0});
      x = ad::prelu(g, x, P(up + ".act"));
      x = ad::concat(g, x, skips[l]);
      for (int b = 0; b < config_.blocks_per_level[l]; ++b) x = block(x, block_name("dec", l, b));
    }
    return ad::sigmoid(g, conv(x, "head", 1, 1));
  }

  /// Inference on a (1, D, H, W) tensor with divisible dims.
  Tensor<T> predict(const Tensor<T>& input, const ForwardProbe& probe = {}) const {
    ad::Graph<T> g(false);
    auto bound = bind(g, false);
    auto out = forward(g, bound, g.input(input, false), probe);
    return g.value(out);
  }

 private:
  static bool is_slope(const std::string& name) { return name.size() > 4 && name.ends_with(".act"); }
  static bool is_transposed(const std::string& name) { return name.rfind("up", 0) == 0; }

  VbNetConfig config_;
  Params params_;
  std::uint64_t trained_iterations_ = 0;
};

using Model = VbNet<float>;

inline Model build_vbnet(const VbNetConfig& config, std::uint64_t seed) { return Model::build(config, seed); }

// ---------------------------------------------------------------------------
// Parameter accounting

/// Weights of one bottleneck block without biases or activations.
inline std::int64_t bottleneck_block_weights(std::int64_t channels, std::int64_t reduced) {
  return channels * reduced + 27 * reduced * reduced + reduced * channels;
}

/// Weights of the single C->C 3x3x3 convolution that a bottleneck replaces.
inline std::int64_t plain_block_weights(std::int64_t channels) { return 27 * channels * channels; }

struct ParamComparison {
  std::int64_t bottleneck = 0;
  std::int64_t plain = 0;
  double ratio() const { return static_cast<double>(plain) / static_cast<double>(bottleneck); }
};

/// Per-block weight counts (no biases) for a C-channel block reduced to r channels.
inline ParamComparison compare_plain_block(std::int64_t channels, std::int64_t reduced) {
  return {bottleneck_block_weights(channels, reduced), plain_block_weights(channels)};
}

/// Trainable parameters of a block including biases and PReLU slopes.
inline std::int64_t bottleneck_block_params(const BottleneckSpec& s) {
  const std::int64_t C = s.channels, r = s.reduced;
  return (C * r + r) + r + (27 * r * r + r) + r + (r * C + C) + C;
}
inline std::int64_t plain_block_params(std::int64_t channels) {
  return 27 * channels * channels + channels + channels;
}

/// Total parameter count of `config`, either as built or with every
/// bottleneck swapped for a plain 3x3x3 convolution block.
inline std::int64_t param_count(const VbNetConfig& config, bool bottleneck = true) {
  config.validate();
  std::int64_t total = 0;
  for (const auto& [name, shape] : Model::parameter_shapes(config))
    total += static_cast<std::int64_t>(Tensor<float>::count(shape));
  if (bottleneck) return total;
  for (int l = 0; l < config.levels; ++l) {
    const int n = config.blocks_per_level[l];
    for (int ch : {config.channels[l], l + 1 < config.levels ? 2 * config.channels[l] : -1}) {
      if (ch < 0) continue;
      const auto s = BottleneckSpec::make(ch, config.bottleneck_ratio, config.residual);
      total += n * (plain_block_params(ch) - bottleneck_block_params(s));
    }
  }
  return total;
}

template <typename T>
std::int64_t param_count(const VbNet<T>& model, bool bottleneck = true) {
  if (bottleneck) return static_cast<std::int64_t>(model.parameter_count());
  return param_count(model.config(), false);
}

/// Whole-network counts for the bottleneck design and its plain counterpart.
inline ParamComparison compare_plain(const VbNetConfig& config) {
  return {param_count(config, true), param_count(config, false)};
}

// ---------------------------------------------------------------------------
// Volume-level inference

/// Reflect-pads a (C, D, H, W) tensor at the far end of each axis to `target`.
template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, Int3 target) {
  const int C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  for (int a = 0; a < 3; ++a) {
    const int n = x.dim(a + 1);
    if (target[a] < n) throw std::invalid_argument("pad_reflect: target smaller than input");
    if (target[a] > 2 * n - 1 && n > 1) throw std::invalid_argument("pad_reflect: padding exceeds reflectable extent");
  }
  Tensor<T> out({C, target[0], target[1], target[2]});
  std::size_t i = 0;
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < target[0]; ++z)
      for (int y = 0; y < target[1]; ++y)
        for (int xx = 0; xx < target[2]; ++xx, ++i) {
          const int sz = reflect_index(z, D), sy = reflect_index(y, H), sx = reflect_index(xx, W);
          out[i] = x[((static_cast<std::size_t>(c) * D + sz) * H + sy) * W + sx];
        }
  return out;
}

/// Lung-window normalised network input (1, nz, ny, nx).
inline Tensor<float> window_tensor(const Volume& v) {
  const auto w = apply_window(v, kLungWindowLevel, kLungWindowWidth);
  const auto& d = v.dims();
  return Tensor<float>({1, d[2], d[1], d[0]}, std::vector<float>(w.data().begin(), w.data().end()));
}

/// Foreground probability for every voxel; pads to the network divisor and crops back.
template <typename T>
Grid<float> predict_probabilities(const VbNet<T>& model, const Volume& v) {
  const auto& d = v.dims();
  const int div = model.config().divisor();
  auto round_up = [div](int n) { return (n + div - 1) / div * div; };
  const Int3 padded{round_up(d[2]), round_up(d[1]), round_up(d[0])};
  auto x = window_tensor(v).template cast<T>();
  if (padded != Int3{d[2], d[1], d[0]}) x = pad_reflect(x, padded);
  const auto prob = model.predict(x);
  Grid<float> out(v.geometry(), 0.0f);
  std::size_t i = 0;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int xx = 0; xx < d[0]; ++xx, ++i)
        out[i] = static_cast<float>(prob[(static_cast<std::size_t>(z) * padded[1] + y) * padded[2] + xx]);
  return out;
}

inline constexpr double kDefaultThreshold = 0.5;

/// Voxel is foreground iff probability > threshold; ties go to background.
inline LabelMask threshold_probabilities(const Grid<float>& prob, double threshold = kDefaultThreshold) {
  LabelMask m = LabelMask::binary(prob.geometry());
  const auto p = prob.data();
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = static_cast<double>(p[i]) > threshold ? 1 : 0;
  return m;
}

template <typename T>
LabelMask segment(const VbNet<T>& model, const Volume& v, double threshold = kDefaultThreshold) {
  if (!(threshold >= 0.0 && threshold < 1.0)) throw std::invalid_argument("segment: threshold must be in [0, 1)");
  return threshold_probabilities(predict_probabilities(model, v), threshold);
}

// ---------------------------------------------------------------------------
// Checkpoints: "VBN1", u32 version, u32 json length, json, u32 tensor count,
// then per tensor u32 name length, name, u32 rank, u32 dims, float32 data.

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Code { io, bad_magic, version_mismatch, truncated, malformed };
  CheckpointError(Code code, const std::string& what) : std::runtime_error("checkpoint: " + what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) throw CheckpointError(CheckpointError::Code::truncated, std::string("truncated ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    need(n, what);
    const auto* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  std::vector<std::uint8_t> b{'V', 'B', 'N', '1'};
  detail::put_u32(b, kCheckpointVersion);
  const nlohmann::json meta{{"config", model.config().to_json()},
                            {"format_version", kCheckpointVersion},
                            {"trained_iterations", model.trained_iterations()}};
  const std::string js = meta.dump();
  detail::put_u32(b, static_cast<std::uint32_t>(js.size()));
  b.insert(b.end(), js.begin(), js.end());
  detail::put_u32(b, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& [name, t] : model.parameters()) {
    detail::put_u32(b, static_cast<std::uint32_t>(name.size()));
    b.insert(b.end(), name.begin(), name.end());
    detail::put_u32(b, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) detail::put_u32(b, static_cast<std::uint32_t>(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.ptr());
    b.insert(b.end(), p, p + t.size() * sizeof(float));
  }
  return b;
}

inline Model decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  using Code = CheckpointError::Code;
  detail::ByteReader r(bytes);
  if (r.str(4, "magic") != "VBN1") throw CheckpointError(Code::bad_magic, "bad magic");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(Code::version_mismatch, "unsupported format version " + std::to_string(version));
  const auto js_len = r.u32("config length");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str(js_len, "config block"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Code::malformed, std::string("config block: ") + e.what());
  }
  if (meta.value("format_version", 0u) != kCheckpointVersion)
    throw CheckpointError(Code::version_mismatch, "config block version mismatch");
  VbNetConfig config;
  try {
    config = VbNetConfig::from_json(meta.at("config"));
  } catch (const std::exception& e) {
    throw CheckpointError(Code::malformed, std::string("config: ") + e.what());
  }
  Model::Params params;
  const auto count = r.u32("tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name = r.str(r.u32("name length"), "name");
    const auto rank = r.u32("rank");
    if (rank == 0 || rank > 5) throw CheckpointError(Code::malformed, "bad rank for " + name);
    std::vector<int> shape;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = r.u32("dims");
      if (d == 0 || d > (1u << 24)) throw CheckpointError(Code::malformed, "bad dims for " + name);
      shape.push_back(static_cast<int>(d));
      n *= d;
    }
    const auto* p = r.take(n * sizeof(float), "tensor data");
    std::vector<float> data(n);
    std::memcpy(data.data(), p, n * sizeof(float));
    params.emplace(name, Tensor<float>(shape, std::move(data)));
  }
  if (!r.done()) throw CheckpointError(Code::malformed, "trailing bytes");
  try {
    return Model(config, std::move(params), meta.value("trained_iterations", std::uint64_t{0}));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(Code::malformed, e.what());
  }
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Code::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Code::io, "short write to " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Code::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace lungquant
