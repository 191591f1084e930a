#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include "lungquant/autodiff.hpp"
#include "lungquant/grid.hpp"
#include "lungquant/phantom.hpp"
#include "lungquant/quantify.hpp"
#include "lungquant/vbnet.hpp"

namespace lungquant {

enum class Optimizer { adam, sgd };

struct Hyperparams {
  Optimizer optimizer = Optimizer::adam;
  double learning_rate = 1e-3;
  /// SGD momentum, or Adam's beta1.
  double momentum = 0.9;
  double beta2 = 0.999;
  int epochs = 10;
  /// Patch extent in voxels (x, y, z); each must be divisible by the network divisor.
  std::array<int, 3> patch_size{32, 32, 32};
  int patches_per_volume = 8;
  /// Patches per optimizer step; the loss is soft Dice over the whole batch.
  int batch_size = 4;
  /// Share of patches centred on infected voxels.
  double foreground_fraction = 0.5;
  bool flip_augment = false;
  std::uint64_t seed = 1;
  /// Holdout evaluation cadence in epochs; 0 evaluates only after the last epoch.
  int eval_every = 1;
  double threshold = kDefaultThreshold;

  void validate(const VbNetConfig& config) const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("hyperparams: learning rate must be >= 0");
    if (epochs < 1) throw std::invalid_argument("hyperparams: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("hyperparams: batch_size must be >= 1");
    if (patches_per_volume < 1) throw std::invalid_argument("hyperparams: patches_per_volume must be >= 1");
    if (foreground_fraction < 0.0 || foreground_fraction > 1.0) throw std::invalid_argument("hyperparams: foreground_fraction must be in [0, 1]");
    if (momentum < 0.0 || momentum >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw std::invalid_argument("hyperparams: momentum terms must be in [0, 1)");
    if (eval_every < 0) throw std::invalid_argument("hyperparams: eval_every must be >= 0");
    for (int p : patch_size)
      if (p < config.divisor() || p % config.divisor() != 0)
        throw std::invalid_argument("hyperparams: patch size must be a positive multiple of " + std::to_string(config.divisor()));
  }
};

inline nlohmann::json to_json(const Hyperparams& h) {
  return {{"optimizer", h.optimizer == Optimizer::adam ? "adam" : "sgd"},
          {"learning_rate", h.learning_rate},
          {"momentum", h.momentum},
          {"beta2", h.beta2},
          {"epochs", h.epochs},
          {"patch_size", h.patch_size},
          {"patches_per_volume", h.patches_per_volume},
          {"batch_size", h.batch_size},
          {"foreground_fraction", h.foreground_fraction},
          {"flip_augment", h.flip_augment},
          {"seed", h.seed},
          {"eval_every", h.eval_every},
          {"threshold", h.threshold}};
}

inline Hyperparams hyperparams_from_json(const nlohmann::json& j) {
  Hyperparams h;
  const auto opt = j.value("optimizer", std::string("adam"));
  if (opt == "adam") h.optimizer = Optimizer::adam;
  else if (opt == "sgd") h.optimizer = Optimizer::sgd;
  else throw std::invalid_argument("hyperparams: unknown optimizer " + opt);
  h.learning_rate = j.value("learning_rate", h.learning_rate);
  h.momentum = j.value("momentum", h.momentum);
  h.beta2 = j.value("beta2", h.beta2);
  h.epochs = j.value("epochs", h.epochs);
  h.patch_size = j.value("patch_size", h.patch_size);
  h.patches_per_volume = j.value("patches_per_volume", h.patches_per_volume);
  h.batch_size = j.value("batch_size", h.batch_size);
  h.foreground_fraction = j.value("foreground_fraction", h.foreground_fraction);
  h.flip_augment = j.value("flip_augment", h.flip_augment);
  h.seed = j.value("seed", h.seed);
  h.eval_every = j.value("eval_every", h.eval_every);
  h.threshold = j.value("threshold", h.threshold);
  return h;
}

struct TrainingCase {
  std::string id;
  Volume volume;
  LabelMask mask;
};

struct Patch {
  std::string case_id;
  /// Corner in (x, y, z) of the possibly padded volume.
  std::array<int, 3> origin{};
  bool foreground = false;
  Tensor<float> input;
  Tensor<float> target;
};

struct PatchSample {
  std::vector<Patch> patches;
  std::vector<std::string> warnings;
};

namespace detail {

inline Tensor<float> mask_tensor(const LabelMask& m) {
  const auto& d = m.dims();
  std::vector<float> v(m.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m[i] ? 1.0f : 0.0f;
  return Tensor<float>({1, d[2], d[1], d[0]}, std::move(v));
}

inline Tensor<float> crop(const Tensor<float>& x, std::array<int, 3> origin, std::array<int, 3> size) {
  const int H = x.dim(2), W = x.dim(3);
  Tensor<float> out({1, size[2], size[1], size[0]});
  std::size_t i = 0;
  for (int z = 0; z < size[2]; ++z)
    for (int y = 0; y < size[1]; ++y) {
      const float* row = x.ptr() + (static_cast<std::size_t>(origin[2] + z) * H + origin[1] + y) * W + origin[0];
      for (int xx = 0; xx < size[0]; ++xx) out[i++] = row[xx];
    }
  return out;
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

}  // namespace detail

/// Draws `patches_per_volume` training patches. Foreground patches keep a
/// randomly chosen infected voxel inside their central half. Volumes smaller
/// than a patch are reflect-padded.
inline PatchSample sample_patches(const TrainingCase& c, const Hyperparams& h, std::mt19937_64& rng) {
  require_same_geometry(c.volume.geometry(), c.mask.geometry(), "sample_patches");
  PatchSample out;
  const auto& d = c.volume.dims();
  const auto& ps = h.patch_size;
  Tensor<float> input = window_tensor(c.volume);
  Tensor<float> target = detail::mask_tensor(c.mask);
  std::array<int, 3> ext = d;
  for (int a = 0; a < 3; ++a) ext[a] = std::max(d[a], ps[a]);
  if (ext != d) {
    const Int3 t{ext[2], ext[1], ext[0]};
    input = pad_reflect(input, t);
    target = pad_reflect(target, t);
    out.warnings.push_back(c.id + ": volume smaller than the patch, reflect-padded");
  }

  std::vector<std::size_t> infected;
  for (std::size_t i = 0; i < c.mask.size(); ++i)
    if (c.mask[i]) infected.push_back(i);
  int n_fg = static_cast<int>(std::lround(h.foreground_fraction * h.patches_per_volume));
  if (n_fg > 0 && infected.empty()) {
    out.warnings.push_back(c.id + ": no infected voxels, foreground patches replaced by random ones");
    n_fg = 0;
  }

  for (int k = 0; k < h.patches_per_volume; ++k) {
    Patch p;
    p.case_id = c.id;
    p.foreground = k < n_fg;
    if (p.foreground) {
      const std::size_t idx = infected[rng() % infected.size()];
      const std::array<int, 3> v{static_cast<int>(idx % d[0]), static_cast<int>((idx / d[0]) % d[1]),
                                 static_cast<int>(idx / (static_cast<std::size_t>(d[0]) * d[1]))};
      for (int a = 0; a < 3; ++a) {
        const int jitter = detail::uniform_int(rng, -ps[a] / 4, ps[a] / 4);
        p.origin[a] = std::clamp(v[a] - ps[a] / 2 + jitter, 0, ext[a] - ps[a]);
      }
    } else {
      for (int a = 0; a < 3; ++a) p.origin[a] = detail::uniform_int(rng, 0, ext[a] - ps[a]);
    }
    p.input = detail::crop(input, p.origin, ps);
    p.target = detail::crop(target, p.origin, ps);
    out.patches.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  std::optional<double> holdout_dice;
  /// Wall-clock time of the epoch; the only nondeterministic field.
  double seconds = 0.0;
};

struct TrainRecord {
  std::vector<EpochRecord> epochs;
  std::vector<std::string> warnings;
  std::size_t patches = 0;
  std::size_t steps = 0;

  std::vector<double> losses() const {
    std::vector<double> l;
    for (const auto& e : epochs) l.push_back(e.loss);
    return l;
  }
};

inline nlohmann::json to_json(const EpochRecord& e) {
  nlohmann::json j{{"epoch", e.epoch}, {"loss", e.loss}, {"seconds", e.seconds}};
  j["holdout_dice"] = e.holdout_dice ? nlohmann::json(*e.holdout_dice) : nlohmann::json(nullptr);
  return j;
}

/// One JSON object per epoch, newline separated.
inline std::string to_jsonl(const TrainRecord& r) {
  std::string s;
  for (const auto& e : r.epochs) s += to_json(e).dump() + "\n";
  return s;
}

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int epoch, std::size_t step, const std::string& what)
      : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ": " + what),
        epoch(epoch),
        step(step) {}
  int epoch;
  std::size_t step;
};

struct CaseScore {
  std::string id;
  double dice = 0.0;
};

struct Evaluation {
  std::vector<CaseScore> cases;
  SummaryStats dice;
  std::vector<std::string> skipped;
};

/// Dice of the thresholded prediction against each case's reference mask.
/// Cases whose mask and volume disagree on geometry are skipped and listed.
inline Evaluation evaluate(const Model& model, const std::vector<TrainingCase>& cases,
                           double threshold = kDefaultThreshold) {
  Evaluation ev;
  std::vector<double> scores;
  for (const auto& c : cases) {
    if (!(c.volume.geometry() == c.mask.geometry())) {
      ev.skipped.push_back(c.id);
      continue;
    }
    const double d = dice(c.mask, segment(model, c.volume, threshold));
    ev.cases.push_back({c.id, d});
    scores.push_back(d);
  }
  if (!scores.empty()) ev.dice = summary_stats(scores);
  return ev;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

struct TrainResult {
  Model model;
  TrainRecord record;
};

namespace detail {

/// Flushes subnormal floats to zero on this thread while in scope.
class DenormalGuard {
 public:
  DenormalGuard() {
#if defined(__SSE__)
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040U);
#endif
  }
  ~DenormalGuard() {
#if defined(__SSE__)
    _mm_setcsr(saved_);
#endif
  }
  DenormalGuard(const DenormalGuard&) = delete;
  DenormalGuard& operator=(const DenormalGuard&) = delete;

 private:
  unsigned saved_ = 0;
};

/// Per-patch soft Dice loss, for monitoring.
inline double soft_dice_value(const Tensor<float>& p, const Tensor<float>& t) {
  double spt = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    spt += static_cast<double>(p[i]) * t[i];
    sp += p[i];
    st += t[i];
  }
  return 1.0 - (2.0 * spt + ad::kDefaultDiceSmooth) / (sp + st + ad::kDefaultDiceSmooth);
}

inline void flip_x(Tensor<float>& t) {
  const int W = t.dim(3);
  const std::size_t rows = t.size() / W;
  for (std::size_t r = 0; r < rows; ++r) std::reverse(t.ptr() + r * W, t.ptr() + (r + 1) * W);
}

}  // namespace detail

/// Patch-based soft-Dice training. The patch pool is drawn once from the seed
/// and each epoch visits it in a seeded shuffled order. The recorded epoch
/// loss is the mean per-patch soft Dice loss.
inline TrainResult train(Model model, const std::vector<TrainingCase>& data, const Hyperparams& h,
                         const std::vector<TrainingCase>& holdout = {}, const EpochCallback& on_epoch = {}) {
  h.validate(model.config());
  if (data.empty()) throw std::invalid_argument("train: empty training set");
  const detail::DenormalGuard ftz;

  TrainRecord record;
  std::vector<Patch> pool;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::mt19937_64 rng(derive_seed(h.seed, i));
    auto s = sample_patches(data[i], h, rng);
    for (auto& w : s.warnings) record.warnings.push_back(std::move(w));
    for (auto& p : s.patches) pool.push_back(std::move(p));
  }
  record.patches = pool.size();

  struct Moments {
    Tensor<float> m, v;
  };
  std::map<std::string, Moments> state;
  for (const auto& [name, t] : model.parameters()) state[name] = {Tensor<float>(t.shape()), Tensor<float>(t.shape())};

  const double b1m = h.momentum, b2m = h.beta2, lr = h.learning_rate;
  std::size_t step = 0;
  std::vector<double> losses(pool.size());
  std::vector<std::size_t> order(pool.size());

  for (int epoch = 1; epoch <= h.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(h.seed ^ 0x5eedULL, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(h.batch_size)) {
      ++step;
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(h.batch_size));
      ad::Graph<float> g(true);
      const auto bound = model.bind(g, true);
      std::vector<ad::Var> preds;
      std::vector<float> targets;
      for (std::size_t j = b0; j < b1; ++j) {
        const std::size_t k = order[j];
        Tensor<float> input = pool[k].input;
        Tensor<float> target = pool[k].target;
        if (h.flip_augment && (shuffle_rng() & 1U)) {
          detail::flip_x(input);
          detail::flip_x(target);
        }
        preds.push_back(model.forward(g, bound, g.input(std::move(input), false)));
        losses[k] = detail::soft_dice_value(g.value(preds.back()), target);
        targets.insert(targets.end(), target.data().begin(), target.data().end());
      }
      ad::Var batch = preds[0];
      for (std::size_t j = 1; j < preds.size(); ++j) batch = ad::concat(g, batch, preds[j]);
      const auto target_var = g.input(Tensor<float>(g.value(batch).shape(), std::move(targets)), false);
      const auto loss = ad::soft_dice_loss(g, batch, target_var);
      if (!std::isfinite(g.value(loss)[0])) throw TrainingDiverged(epoch, step, "loss is not finite");
      g.backward(loss);

      const double bc1 = 1.0 - std::pow(b1m, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(b2m, static_cast<double>(step));
      for (auto& [name, param] : model.parameters()) {
        const Tensor<float> grad = g.grad(bound.at(name));
        for (float gv : grad.data())
          if (!std::isfinite(gv)) throw TrainingDiverged(epoch, step, "gradient of " + name + " is not finite");
        auto& st = state[name];
        float* w = param.ptr();
        float* m = st.m.ptr();
        float* v = st.v.ptr();
        const float* gr = grad.ptr();
        if (h.optimizer == Optimizer::adam) {
          for (std::size_t i = 0; i < param.size(); ++i) {
            m[i] = static_cast<float>(b1m * m[i] + (1.0 - b1m) * gr[i]);
            v[i] = static_cast<float>(b2m * v[i] + (1.0 - b2m) * gr[i] * gr[i]);
            const double mh = m[i] / bc1, vh = v[i] / bc2;
            w[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + 1e-8));
          }
        } else {
          for (std::size_t i = 0; i < param.size(); ++i) {
            m[i] = static_cast<float>(b1m * m[i] + gr[i]);
            w[i] -= static_cast<float>(lr * m[i]);
          }
        }
      }
    }

    EpochRecord e;
    e.epoch = epoch;
    double sum = 0.0;
    for (double l : losses) sum += l;
    e.loss = sum / static_cast<double>(losses.size());
    const bool eval_now = h.eval_every > 0 ? epoch % h.eval_every == 0 || epoch == h.epochs : epoch == h.epochs;
    if (!holdout.empty() && eval_now) e.holdout_dice = evaluate(model, holdout, h.threshold).dice.mean;
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record.epochs.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  record.steps = step;
  model.set_trained_iterations(model.trained_iterations() + step);
  return {std::move(model), std::move(record)};
}

}  // namespace lungquant
