#pragma once

// Synthetic chest CT phantoms with exact ground truth: ellipsoidal body and
// lungs, planar lobe/segment partitions and ellipsoidal lesions of known
// opacity class. Also a simulated radiologist that "corrects" proposals.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lungquant/grid.hpp"
#include "lungquant/quantify.hpp"

namespace lungquant {

enum class OpacityClass { ggo, consolidation };

inline const char* to_string(OpacityClass c) { return c == OpacityClass::ggo ? "ggo" : "consolidation"; }
inline OpacityClass opacity_from_string(const std::string& s) {
  if (s == "ggo") return OpacityClass::ggo;
  if (s == "consolidation") return OpacityClass::consolidation;
  throw std::invalid_argument("unknown opacity class " + s);
}

/// Ellipsoidal lesion in voxel coordinates (x, y, z).
struct Lesion {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
  OpacityClass cls = OpacityClass::ggo;
  double hu_mean = -550.0;
  double hu_sd = 30.0;

  bool contains(int x, int y, int z) const {
    double s = 0.0;
    const std::array<double, 3> p{double(x), double(y), double(z)};
    for (int a = 0; a < 3; ++a) {
      const double d = (p[a] - center[a]) / radii[a];
      s += d * d;
    }
    return s <= 1.0;
  }
};

/// Ellipsoid given as fractions of the grid extent.
struct Ellipsoid {
  std::array<double, 3> center{0.5, 0.5, 0.5};
  std::array<double, 3> radii{0.25, 0.25, 0.25};

  bool contains(const Geometry& g, int x, int y, int z) const {
    double s = 0.0;
    const std::array<int, 3> p{x, y, z};
    for (int a = 0; a < 3; ++a) {
      const double c = center[a] * (g.dims[a] - 1);
      const double r = radii[a] * g.dims[a];
      const double d = (p[a] - c) / r;
      s += d * d;
    }
    return s <= 1.0;
  }
};

struct PhantomSpec {
  Geometry geometry{{64, 64, 64}, {4.0, 4.0, 4.0}, {0.0, 0.0, 0.0}};
  std::uint64_t seed = 1;
  Ellipsoid body{{0.5, 0.5, 0.5}, {0.47, 0.40, 0.49}};
  /// Patient right lung sits at low x.
  Ellipsoid right_lung{{0.30, 0.5, 0.5}, {0.19, 0.32, 0.42}};
  Ellipsoid left_lung{{0.70, 0.5, 0.5}, {0.19, 0.32, 0.42}};
  /// Fractions of the lung's z-extent (inferior = low z) where lobes change.
  double right_lower_upper_split = 0.40;
  double right_middle_upper_split = 0.65;
  double left_split = 0.50;
  std::vector<Lesion> lesions;
  double air_hu = -1000.0;
  double tissue_hu = 40.0;
  double lung_hu = -850.0;
  double noise_sd = 30.0;
  HuRange ggo_range = kDefaultGgoRange;
  HuRange consolidation_range = kDefaultConsolidationRange;
};

inline nlohmann::json to_json(const Lesion& l) {
  return {{"center", l.center}, {"radii", l.radii}, {"class", to_string(l.cls)}, {"hu_mean", l.hu_mean},
          {"hu_sd", l.hu_sd}};
}

inline nlohmann::json to_json(const Ellipsoid& e) { return {{"center", e.center}, {"radii", e.radii}}; }

inline nlohmann::json to_json(const PhantomSpec& s) {
  nlohmann::json lesions = nlohmann::json::array();
  for (const auto& l : s.lesions) lesions.push_back(to_json(l));
  return {{"dims", s.geometry.dims},
          {"spacing", s.geometry.spacing},
          {"origin", s.geometry.origin},
          {"seed", s.seed},
          {"body", to_json(s.body)},
          {"right_lung", to_json(s.right_lung)},
          {"left_lung", to_json(s.left_lung)},
          {"right_lower_upper_split", s.right_lower_upper_split},
          {"right_middle_upper_split", s.right_middle_upper_split},
          {"left_split", s.left_split},
          {"lesions", lesions},
          {"air_hu", s.air_hu},
          {"tissue_hu", s.tissue_hu},
          {"lung_hu", s.lung_hu},
          {"noise_sd", s.noise_sd},
          {"ggo_range", {s.ggo_range.lo, s.ggo_range.hi}},
          {"consolidation_range", {s.consolidation_range.lo, s.consolidation_range.hi}}};
}

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  s.geometry.dims = j.value("dims", s.geometry.dims);
  s.geometry.spacing = j.value("spacing", s.geometry.spacing);
  s.geometry.origin = j.value("origin", s.geometry.origin);
  s.seed = j.value("seed", s.seed);
  auto ell = [&](const char* key, Ellipsoid& e) {
    if (!j.contains(key)) return;
    e.center = j[key].value("center", e.center);
    e.radii = j[key].value("radii", e.radii);
  };
  ell("body", s.body);
  ell("right_lung", s.right_lung);
  ell("left_lung", s.left_lung);
  s.right_lower_upper_split = j.value("right_lower_upper_split", s.right_lower_upper_split);
  s.right_middle_upper_split = j.value("right_middle_upper_split", s.right_middle_upper_split);
  s.left_split = j.value("left_split", s.left_split);
  for (const auto& l : j.value("lesions", nlohmann::json::array())) {
    Lesion les;
    les.center = l.at("center").get<std::array<double, 3>>();
    les.radii = l.at("radii").get<std::array<double, 3>>();
    les.cls = opacity_from_string(l.value("class", "ggo"));
    les.hu_mean = l.value("hu_mean", les.cls == OpacityClass::ggo ? -550.0 : -100.0);
    les.hu_sd = l.value("hu_sd", 30.0);
    s.lesions.push_back(les);
  }
  s.air_hu = j.value("air_hu", s.air_hu);
  s.tissue_hu = j.value("tissue_hu", s.tissue_hu);
  s.lung_hu = j.value("lung_hu", s.lung_hu);
  s.noise_sd = j.value("noise_sd", s.noise_sd);
  if (j.contains("ggo_range")) s.ggo_range = {j["ggo_range"][0], j["ggo_range"][1]};
  if (j.contains("consolidation_range")) s.consolidation_range = {j["consolidation_range"][0], j["consolidation_range"][1]};
  return s;
}

class InvalidPhantomSpec : public std::invalid_argument {
 public:
  explicit InvalidPhantomSpec(const std::string& what) : std::invalid_argument("phantom spec: " + what) {}
};

struct Phantom {
  Volume volume;
  LabelMask infection;
  RegionSet regions;
  /// 1 = ground-glass, 2 = consolidation, per infected voxel.
  LabelMask opacity;
  std::int64_t ggo_voxels = 0;
  std::int64_t consolidation_voxels = 0;
};

namespace detail {

/// Segment label from lobe and the position within the lung's y extent.
inline int segment_for(int lobe, double yf) {
  static constexpr std::array<int, kLobeCount + 1> first{0, 1, 5, 9, 12, 14};
  static constexpr std::array<int, kLobeCount + 1> count{0, 4, 4, 3, 2, 5};
  const int k = std::min(count[lobe] - 1, static_cast<int>(std::floor(yf * count[lobe])));
  return first[lobe] + std::max(0, k);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Deterministic child seed for stream `index` of `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return detail::splitmix64(detail::splitmix64(seed) ^ (index * 0xd1b54a32d192ed03ULL));
}

/// Lung and its lobe/segment partition for a spec, without intensities.
inline RegionSet phantom_regions(const PhantomSpec& spec) {
  const Geometry& g = spec.geometry;
  g.validate();
  LabelMask segments(g, segment_label_names());
  for (int side = 0; side < 2; ++side) {
    const Ellipsoid& lung = side == 0 ? spec.right_lung : spec.left_lung;
    int zmin = g.dims[2], zmax = -1, ymin = g.dims[1], ymax = -1;
    for (int z = 0; z < g.dims[2]; ++z)
      for (int y = 0; y < g.dims[1]; ++y)
        for (int x = 0; x < g.dims[0]; ++x)
          if (lung.contains(g, x, y, z)) {
            zmin = std::min(zmin, z);
            zmax = std::max(zmax, z);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
          }
    if (zmax < 0) throw InvalidPhantomSpec("lung ellipsoid does not cover any voxel");
    for (int z = zmin; z <= zmax; ++z) {
      const double zf = (z - zmin + 0.5) / (zmax - zmin + 1);
      int lobe;
      if (side == 0)
        lobe = zf < spec.right_lower_upper_split ? 5 : zf < spec.right_middle_upper_split ? 4 : 3;
      else
        lobe = zf < spec.left_split ? 2 : 1;
      for (int y = ymin; y <= ymax; ++y) {
        const double yf = (y - ymin + 0.5) / (ymax - ymin + 1);
        const int seg = detail::segment_for(lobe, yf);
        for (int x = 0; x < g.dims[0]; ++x) {
          if (!lung.contains(g, x, y, z)) continue;
          auto& v = segments.at(x, y, z);
          if (v != 0) throw InvalidPhantomSpec("lung ellipsoids overlap");
          v = static_cast<std::uint8_t>(seg);
        }
      }
    }
  }
  auto regions = RegionSet::from_segments(segments);
  try {
    regions.validate();
  } catch (const RegionError& e) {
    throw InvalidPhantomSpec(std::string("grid too coarse for the region plan (") + e.what() + ")");
  }
  return regions;
}

inline Phantom gen_phantom(const PhantomSpec& spec) {
  const Geometry& g = spec.geometry;
  g.validate();
  spec.ggo_range.validate("ggo");
  spec.consolidation_range.validate("consolidation");
  for (const auto& l : spec.lesions)
    for (double r : l.radii)
      if (!(r > 0.0)) throw InvalidPhantomSpec("lesion radii must be positive");

  Phantom p;
  p.regions = phantom_regions(spec);
  p.infection = LabelMask::binary(g, "infection");
  p.opacity = LabelMask(g, {{1, "ground-glass opacity"}, {2, "consolidation"}});

  for (std::size_t k = 0; k < spec.lesions.size(); ++k) {
    const auto& l = spec.lesions[k];
    bool any = false;
    std::array<int, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      lo[a] = static_cast<int>(std::floor(l.center[a] - l.radii[a]));
      hi[a] = static_cast<int>(std::ceil(l.center[a] + l.radii[a]));
    }
    for (int z = lo[2]; z <= hi[2]; ++z)
      for (int y = lo[1]; y <= hi[1]; ++y)
        for (int x = lo[0]; x <= hi[0]; ++x) {
          if (!l.contains(x, y, z)) continue;
          if (!g.contains(x, y, z)) throw InvalidPhantomSpec("lesion " + std::to_string(k) + " lies outside the grid");
          const auto i = g.index(x, y, z);
          if (p.regions.lung[i] == 0)
            throw InvalidPhantomSpec("lesion " + std::to_string(k) + " extends outside the lung");
          any = true;
          p.infection[i] = 1;
          p.opacity[i] = l.cls == OpacityClass::ggo ? 1 : 2;
        }
    if (!any) throw InvalidPhantomSpec("lesion " + std::to_string(k) + " covers no voxel");
  }

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<float> hu(g.voxel_count());
  std::size_t i = 0;
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x, ++i) {
        const double n = noise(rng);
        const int cls = p.opacity[i];
        double v;
        if (cls != 0) {
          // Lesion intensities stay inside their class range so the planted split is exact.
          const Lesion* owner = nullptr;
          for (auto it = spec.lesions.rbegin(); it != spec.lesions.rend(); ++it)
            if (it->contains(x, y, z)) {
              owner = &*it;
              break;
            }
          const HuRange& r = cls == 1 ? spec.ggo_range : spec.consolidation_range;
          v = std::clamp(owner->hu_mean + owner->hu_sd * n, r.lo + 0.5, r.hi);
        } else if (p.regions.lung[i] != 0) {
          v = spec.lung_hu + spec.noise_sd * n;
        } else if (spec.body.contains(g, x, y, z)) {
          v = spec.tissue_hu + spec.noise_sd * n;
        } else {
          v = spec.air_hu + spec.noise_sd * n;
        }
        hu[i] = static_cast<float>(v);
      }
  p.volume = Volume(g, std::move(hu));
  p.ggo_voxels = static_cast<std::int64_t>(p.opacity.count_label(1));
  p.consolidation_voxels = static_cast<std::int64_t>(p.opacity.count_label(2));
  return p;
}

// ---------------------------------------------------------------------------
// Cohorts

struct CohortOptions {
  int min_lesions = 2;
  int max_lesions = 5;
  /// Lesion semi-axis range in voxels.
  double min_radius = 3.0;
  double max_radius = 9.0;
  double consolidation_fraction = 0.4;
  /// Relative chance of seeding a lesion in a lower lobe versus any other lobe.
  double lower_lobe_weight = 1.0;
};

inline nlohmann::json to_json(const CohortOptions& o) {
  return {{"min_lesions", o.min_lesions},     {"max_lesions", o.max_lesions},
          {"min_radius", o.min_radius},       {"max_radius", o.max_radius},
          {"consolidation_fraction", o.consolidation_fraction},
          {"lower_lobe_weight", o.lower_lobe_weight}};
}

inline CohortOptions cohort_options_from_json(const nlohmann::json& j) {
  CohortOptions o;
  o.min_lesions = j.value("min_lesions", o.min_lesions);
  o.max_lesions = j.value("max_lesions", o.max_lesions);
  o.min_radius = j.value("min_radius", o.min_radius);
  o.max_radius = j.value("max_radius", o.max_radius);
  o.consolidation_fraction = j.value("consolidation_fraction", o.consolidation_fraction);
  o.lower_lobe_weight = j.value("lower_lobe_weight", o.lower_lobe_weight);
  return o;
}

/// Places random lesions fully inside the lung of `base` using `seed`.
inline PhantomSpec random_case_spec(const PhantomSpec& base, const CohortOptions& opt, std::uint64_t seed) {
  if (opt.min_lesions < 0 || opt.max_lesions < opt.min_lesions) throw std::invalid_argument("cohort: bad lesion count range");
  if (!(opt.min_radius > 0.0) || opt.max_radius < opt.min_radius) throw std::invalid_argument("cohort: bad radius range");
  PhantomSpec spec = base;
  spec.seed = seed;
  spec.lesions.clear();
  const auto regions = phantom_regions(spec);
  const auto& g = spec.geometry;

  std::array<std::vector<std::size_t>, kLobeCount> lobe_voxels;
  for (std::size_t i = 0; i < regions.lobes.size(); ++i)
    if (regions.lobes[i]) lobe_voxels[regions.lobes[i] - 1].push_back(i);
  std::array<double, kLobeCount> weight{};
  for (int l = 0; l < kLobeCount; ++l) weight[l] = (l == 1 || l == 4) ? opt.lower_lobe_weight : 1.0;

  std::mt19937_64 rng(derive_seed(seed, 7));
  auto unit = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  const int n = opt.min_lesions + static_cast<int>(rng() % static_cast<std::uint64_t>(opt.max_lesions - opt.min_lesions + 1));
  const double wsum = weight[0] + weight[1] + weight[2] + weight[3] + weight[4];

  auto fits = [&](const Lesion& les) {
    const auto& c = les.center;
    for (int z = static_cast<int>(std::floor(c[2] - les.radii[2])); z <= std::ceil(c[2] + les.radii[2]); ++z)
      for (int y = static_cast<int>(std::floor(c[1] - les.radii[1])); y <= std::ceil(c[1] + les.radii[1]); ++y)
        for (int x = static_cast<int>(std::floor(c[0] - les.radii[0])); x <= std::ceil(c[0] + les.radii[0]); ++x)
          if (les.contains(x, y, z) && (!g.contains(x, y, z) || regions.lung.at(x, y, z) == 0)) return false;
    return true;
  };

  for (int k = 0; k < n; ++k) {
    double pick = unit() * wsum;
    int lobe = 0;
    while (lobe < kLobeCount - 1 && pick >= weight[lobe]) pick -= weight[lobe++];
    const auto& vox = lobe_voxels[lobe];
    Lesion les;
    for (auto& r : les.radii) r = opt.min_radius + unit() * (opt.max_radius - opt.min_radius);
    les.cls = unit() < opt.consolidation_fraction ? OpacityClass::consolidation : OpacityClass::ggo;
    les.hu_mean = les.cls == OpacityClass::ggo ? -550.0 : -100.0;
    les.hu_sd = spec.noise_sd;
    // Try several centres in the chosen lobe, then shrink until the ellipsoid fits.
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      if (attempt > 0 && attempt % 25 == 0)
        for (auto& r : les.radii) r = std::max(1.0, r * 0.85);
      const std::size_t idx = vox[static_cast<std::size_t>(unit() * vox.size()) % vox.size()];
      les.center = {double(idx % g.dims[0]), double((idx / g.dims[0]) % g.dims[1]),
                    double(idx / (static_cast<std::size_t>(g.dims[0]) * g.dims[1]))};
      placed = fits(les);
    }
    if (placed) spec.lesions.push_back(les);
  }
  return spec;
}

struct CohortCase {
  std::string id;
  PhantomSpec spec;
  Phantom phantom;
};

/// `n` phantoms with per-case lesion plans drawn from `opt`; case i uses derive_seed(seed, i).
inline std::vector<CohortCase> gen_cohort(int n, const PhantomSpec& base, std::uint64_t seed,
                                          const CohortOptions& opt = {}) {
  if (n < 1) throw std::invalid_argument("gen_cohort: n must be >= 1");
  std::vector<CohortCase> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case_%03d", i);
    auto spec = random_case_spec(base, opt, derive_seed(seed, static_cast<std::uint64_t>(i)));
    auto phantom = gen_phantom(spec);
    out.push_back({id, std::move(spec), std::move(phantom)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Simulated corrector

struct CorrectorModel {
  /// Morphological bias of the corrected outline: >0 dilates, <0 erodes (voxels).
  int error_radius = 0;
  /// Chance that each outline voxel of the corrected mask is flipped.
  double flip_probability = 0.0;
  double seconds_per_voxel = 0.05;
  std::uint64_t seed = 11;

  void validate() const {
    if (flip_probability < 0.0 || flip_probability > 1.0) throw std::invalid_argument("corrector: flip probability");
    if (seconds_per_voxel < 0.0) throw std::invalid_argument("corrector: seconds_per_voxel must be >= 0");
  }
};

inline nlohmann::json to_json(const CorrectorModel& c) {
  return {{"error_radius", c.error_radius},
          {"flip_probability", c.flip_probability},
          {"seconds_per_voxel", c.seconds_per_voxel},
          {"seed", c.seed}};
}

inline CorrectorModel corrector_from_json(const nlohmann::json& j) {
  CorrectorModel c;
  c.error_radius = j.value("error_radius", c.error_radius);
  c.flip_probability = j.value("flip_probability", c.flip_probability);
  c.seconds_per_voxel = j.value("seconds_per_voxel", c.seconds_per_voxel);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

/// Voxels whose value differs from at least one 6-neighbour.
inline std::vector<std::size_t> outline_voxels(const LabelMask& m) {
  const auto& g = m.geometry();
  std::vector<std::size_t> out;
  static constexpr int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) {
        const bool v = m.at(x, y, z) != 0;
        for (const auto& o : off) {
          const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (g.contains(nx, ny, nz) && (m.at(nx, ny, nz) != 0) != v) {
            out.push_back(g.index(x, y, z));
            break;
          }
        }
      }
  return out;
}

/// One 6-connected dilation (grow) or erosion (!grow) step.
inline LabelMask morph_step(const LabelMask& m, bool grow) {
  LabelMask out = m;
  for (std::size_t i : outline_voxels(m)) out[i] = grow ? 1 : 0;
  return out;
}

inline std::int64_t symmetric_difference(const LabelMask& a, const LabelMask& b) {
  require_same_geometry(a.geometry(), b.geometry(), "symmetric_difference");
  std::int64_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += (a[i] != 0) != (b[i] != 0);
  return n;
}

struct CorrectionResult {
  LabelMask corrected;
  double seconds = 0.0;
  std::int64_t edited_voxels = 0;
};

/// The corrected mask is the truth perturbed by the corrector's habits;
/// effort is proportional to how much of the proposal had to change.
inline CorrectionResult simulate_correction(const LabelMask& proposal, const LabelMask& truth,
                                            const CorrectorModel& corrector) {
  corrector.validate();
  require_same_geometry(proposal.geometry(), truth.geometry(), "simulate_correction");
  LabelMask c = LabelMask::binary(truth.geometry());
  for (std::size_t i = 0; i < truth.size(); ++i) c[i] = truth[i] != 0;
  for (int k = 0; k < std::abs(corrector.error_radius); ++k) c = morph_step(c, corrector.error_radius > 0);
  if (corrector.flip_probability > 0.0) {
    std::mt19937_64 rng(corrector.seed);
    for (std::size_t i : outline_voxels(c)) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      if (u < corrector.flip_probability) c[i] = c[i] ? 0 : 1;
    }
  }
  CorrectionResult r{std::move(c)};
  r.edited_voxels = symmetric_difference(proposal, r.corrected);
  r.seconds = corrector.seconds_per_voxel * static_cast<double>(r.edited_voxels);
  return r;
}

}  // namespace lungquant
