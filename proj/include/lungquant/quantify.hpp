#pragma once

// Overlap, volume and percentage-of-infection metrics, HU histograms,
// opacity-class splits, correlation and distribution summaries, plus the
// per-case and cohort report shapes built on top of them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lungquant/grid.hpp"

namespace lungquant {

inline constexpr int kLobeCount = 5;
inline constexpr int kSegmentCount = 18;

/// Lobe labels 1..5.
inline const std::array<std::string, kLobeCount>& lobe_names() {
  static const std::array<std::string, kLobeCount> names{
      "Left upper lobe", "Left lower lobe", "Right upper lobe", "Right middle lobe", "Right lower lobe"};
  return names;
}

/// Bronchopulmonary segment labels 1..18, grouped by lobe.
inline const std::array<std::string, kSegmentCount>& segment_names() {
  static const std::array<std::string, kSegmentCount> names{
      "Left upper lobe / posterior tip",        "Left upper lobe / anterior",
      "Left upper lobe / upper tongue",         "Left upper lobe / lower tongue",
      "Left lower lobe / dorsal",               "Left lower lobe / anterior medial basal",
      "Left lower lobe / outer basal",          "Left lower lobe / posterior basal",
      "Right upper lobe / apical",              "Right upper lobe / back",
      "Right upper lobe / anterior",            "Right middle lobe / lateral",
      "Right middle lobe / medial",             "Right lower lobe / dorsal",
      "Right lower lobe / inner basal",         "Right lower lobe / anterior basal",
      "Right lower lobe / outer basal",         "Right lower lobe / posterior basal"};
  return names;
}

/// Parent lobe label of each segment label (index 0 unused).
inline constexpr std::array<int, kSegmentCount + 1> kSegmentLobe{0, 1, 1, 1, 1, 2, 2, 2, 2, 3,
                                                                 3, 3, 4, 4, 5, 5, 5, 5, 5};

inline LabelMask::Names lobe_label_names() {
  LabelMask::Names n;
  for (int i = 0; i < kLobeCount; ++i) n[i + 1] = lobe_names()[i];
  return n;
}
inline LabelMask::Names segment_label_names() {
  LabelMask::Names n;
  for (int i = 0; i < kSegmentCount; ++i) n[i + 1] = segment_names()[i];
  return n;
}

class RegionError : public std::invalid_argument {
 public:
  explicit RegionError(const std::string& what) : std::invalid_argument("regions: " + what) {}
};

class UndefinedPoi : public std::domain_error {
 public:
  explicit UndefinedPoi(const std::string& region)
      : std::domain_error("POI undefined for empty region " + region), region_(region) {}
  const std::string& region() const { return region_; }

 private:
  std::string region_;
};

/// Whole lung, 5 lobes and 18 segments, each level an exact partition of the one above.
struct RegionSet {
  LabelMask lung;
  LabelMask lobes;
  LabelMask segments;

  /// Derives lobes and lung from a segment label map.
  static RegionSet from_segments(const LabelMask& segments) {
    RegionSet r;
    r.segments = segments;
    r.segments.set_label_names(segment_label_names());
    r.lobes = LabelMask(segments.geometry(), lobe_label_names());
    r.lung = LabelMask::binary(segments.geometry(), "lung");
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const int s = segments[i];
      if (s > kSegmentCount) throw RegionError("segment label " + std::to_string(s) + " out of range");
      r.lobes[i] = static_cast<std::uint8_t>(kSegmentLobe[s]);
      r.lung[i] = s ? 1 : 0;
    }
    return r;
  }

  /// Throws RegionError unless segments partition lobes and lobes partition the lung.
  void validate() const {
    if (!(lung.geometry() == lobes.geometry()) || !(lung.geometry() == segments.geometry()))
      throw RegionError("lung, lobe and segment maps must share geometry");
    std::array<std::size_t, kLobeCount + 1> lobe_voxels{};
    std::array<std::size_t, kSegmentCount + 1> seg_voxels{};
    for (std::size_t i = 0; i < lung.size(); ++i) {
      const int l = lung[i], lo = lobes[i], s = segments[i];
      if (l > 1) throw RegionError("lung mask must be binary");
      if (lo > kLobeCount) throw RegionError("lobe label out of range");
      if (s > kSegmentCount) throw RegionError("segment label out of range");
      if ((l != 0) != (lo != 0)) throw RegionError("lobes do not partition the lung");
      if (kSegmentLobe[s] != lo) throw RegionError("segments do not partition their lobes");
      ++lobe_voxels[lo];
      ++seg_voxels[s];
    }
    for (int i = 1; i <= kLobeCount; ++i)
      if (lobe_voxels[i] == 0) throw RegionError("empty lobe " + lobe_names()[i - 1]);
    for (int i = 1; i <= kSegmentCount; ++i)
      if (seg_voxels[i] == 0) throw RegionError("empty segment " + segment_names()[i - 1]);
  }

  const Geometry& geometry() const { return lung.geometry(); }
};

// ---------------------------------------------------------------------------
// Voxel metrics

/// 2|R∩S| / (|R|+|S|) over nonzero voxels; two empty masks agree perfectly (1.0).
inline double dice(const LabelMask& reference, const LabelMask& segmented) {
  require_same_geometry(reference.geometry(), segmented.geometry(), "dice");
  std::int64_t r = 0, s = 0, both = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const bool a = reference[i] != 0, b = segmented[i] != 0;
    r += a;
    s += b;
    both += a && b;
  }
  if (r + s == 0) return 1.0;
  return static_cast<double>(2 * both) / static_cast<double>(r + s);
}

/// Infected volume in cm³.
inline double infection_volume(const LabelMask& mask, const std::array<double, 3>& spacing) {
  for (double s : spacing)
    if (!(s > 0.0)) throw std::invalid_argument("infection_volume: spacing must be positive");
  return static_cast<double>(mask.count_nonzero()) * (spacing[0] * spacing[1] * spacing[2]) / 1000.0;
}
inline double infection_volume(const LabelMask& mask) { return infection_volume(mask, mask.geometry().spacing); }

/// Percentage of `region` voxels that are infected.
inline double poi(const LabelMask& infection, const LabelMask& region, const std::string& region_name = "region") {
  require_same_geometry(infection.geometry(), region.geometry(), "poi");
  std::int64_t n = 0, hit = 0;
  for (std::size_t i = 0; i < region.size(); ++i) {
    if (region[i] == 0) continue;
    ++n;
    hit += infection[i] != 0;
  }
  if (n == 0) throw UndefinedPoi(region_name);
  return 100.0 * static_cast<double>(hit) / static_cast<double>(n);
}

struct RegionPoi {
  std::string name;
  std::int64_t region_voxels = 0;
  std::int64_t infected_voxels = 0;
  double poi = 0.0;
  bool infected() const { return infected_voxels > 0; }
};

struct PoiBreakdown {
  RegionPoi lung;
  std::array<RegionPoi, kLobeCount> lobes;
  std::array<RegionPoi, kSegmentCount> segments;
};

/// POI of the whole lung, every lobe and every segment in a single pass.
inline PoiBreakdown poi_breakdown(const LabelMask& infection, const RegionSet& regions) {
  regions.validate();
  require_same_geometry(infection.geometry(), regions.geometry(), "poi_breakdown");
  PoiBreakdown out;
  out.lung.name = "The whole lung";
  for (int i = 0; i < kLobeCount; ++i) out.lobes[i].name = lobe_names()[i];
  for (int i = 0; i < kSegmentCount; ++i) out.segments[i].name = segment_names()[i];
  for (std::size_t i = 0; i < infection.size(); ++i) {
    const int s = regions.segments[i];
    if (s == 0) continue;
    const int inf = infection[i] != 0;
    auto& lo = out.lobes[kSegmentLobe[s] - 1];
    auto& sg = out.segments[s - 1];
    ++out.lung.region_voxels;
    ++lo.region_voxels;
    ++sg.region_voxels;
    out.lung.infected_voxels += inf;
    lo.infected_voxels += inf;
    sg.infected_voxels += inf;
  }
  auto finish = [](RegionPoi& r) {
    if (r.region_voxels == 0) throw UndefinedPoi(r.name);
    r.poi = 100.0 * static_cast<double>(r.infected_voxels) / static_cast<double>(r.region_voxels);
  };
  finish(out.lung);
  for (auto& r : out.lobes) finish(r);
  for (auto& r : out.segments) finish(r);
  return out;
}

struct Histogram {
  std::vector<double> edges;
  std::vector<std::int64_t> counts;  // counts[i] covers [edges[i], edges[i+1])
  std::int64_t underflow = 0;
  std::int64_t overflow = 0;

  std::int64_t total() const {
    std::int64_t t = underflow + overflow;
    for (auto c : counts) t += c;
    return t;
  }
};

inline std::vector<double> default_hu_edges() {
  std::vector<double> e;
  for (int v = -1000; v <= 100; v += 50) e.push_back(v);
  return e;
}

/// Left-closed, right-open bins over HU values inside `mask`.
inline Histogram hu_histogram(const Grid<float>& volume, const LabelMask& mask, const std::vector<double>& edges) {
  if (edges.size() < 2) throw std::invalid_argument("hu_histogram: need at least 2 edges");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw std::invalid_argument("hu_histogram: edges must be strictly increasing");
  require_same_geometry(volume.geometry(), mask.geometry(), "hu_histogram");
  Histogram h{edges, std::vector<std::int64_t>(edges.size() - 1, 0), 0, 0};
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0) continue;
    const double v = volume[i];
    if (v < edges.front()) {
      ++h.underflow;
    } else if (v >= edges.back()) {
      ++h.overflow;
    } else {
      const auto it = std::upper_bound(edges.begin(), edges.end(), v);
      ++h.counts[static_cast<std::size_t>(it - edges.begin()) - 1];
    }
  }
  return h;
}

/// Half-open HU interval (lo, hi].
struct HuRange {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double v) const { return v > lo && v <= hi; }
  bool overlaps(const HuRange& o) const { return lo < o.hi && o.lo < hi; }
  void validate(const char* what) const {
    if (!(lo < hi)) throw std::invalid_argument(std::string(what) + ": range needs lo < hi");
  }
  bool operator==(const HuRange&) const = default;
};

inline constexpr HuRange kDefaultGgoRange{-750.0, -300.0};
inline constexpr HuRange kDefaultConsolidationRange{-300.0, 50.0};

struct OpacitySplit {
  LabelMask ggo;
  LabelMask consolidation;
  std::int64_t ggo_voxels = 0;
  std::int64_t consolidation_voxels = 0;
  std::int64_t other_voxels = 0;
  double ggo_volume_cm3 = 0.0;
  double consolidation_volume_cm3 = 0.0;
  double other_volume_cm3 = 0.0;
  /// Percent of lung voxels; present when a lung mask was supplied.
  std::optional<double> ggo_poi;
  std::optional<double> consolidation_poi;
};

/// Partitions infected voxels into ground-glass, consolidation and other by HU.
inline OpacitySplit ggo_consolidation_split(const Grid<float>& volume, const LabelMask& infection,
                                            HuRange ggo = kDefaultGgoRange,
                                            HuRange consolidation = kDefaultConsolidationRange,
                                            const LabelMask* lung = nullptr) {
  ggo.validate("ggo");
  consolidation.validate("consolidation");
  if (ggo.overlaps(consolidation)) throw std::invalid_argument("ggo_consolidation_split: ranges overlap");
  require_same_geometry(volume.geometry(), infection.geometry(), "ggo_consolidation_split");
  OpacitySplit s;
  s.ggo = LabelMask::binary(infection.geometry(), "ground-glass opacity");
  s.consolidation = LabelMask::binary(infection.geometry(), "consolidation");
  for (std::size_t i = 0; i < infection.size(); ++i) {
    if (infection[i] == 0) continue;
    const double v = volume[i];
    if (ggo.contains(v)) {
      s.ggo[i] = 1;
      ++s.ggo_voxels;
    } else if (consolidation.contains(v)) {
      s.consolidation[i] = 1;
      ++s.consolidation_voxels;
    } else {
      ++s.other_voxels;
    }
  }
  const double vv = infection.geometry().voxel_volume_mm3();
  s.ggo_volume_cm3 = static_cast<double>(s.ggo_voxels) * vv / 1000.0;
  s.consolidation_volume_cm3 = static_cast<double>(s.consolidation_voxels) * vv / 1000.0;
  s.other_volume_cm3 = static_cast<double>(s.other_voxels) * vv / 1000.0;
  if (lung) {
    s.ggo_poi = poi(s.ggo, *lung, "lung");
    s.consolidation_poi = poi(s.consolidation, *lung, "lung");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Statistics

class UndefinedCorrelation : public std::domain_error {
 public:
  explicit UndefinedCorrelation(const std::string& what) : std::domain_error("pearson: " + what) {}
};

/// r = (NΣxy − ΣxΣy) / (√(NΣx² − (Σx)²) · √(NΣy² − (Σy)²)).
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: lists differ in length");
  if (x.size() < 2) throw std::invalid_argument("pearson: need at least 2 observations");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  const bool flat_x = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; });
  const bool flat_y = std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
  if (flat_x || flat_y) throw UndefinedCorrelation("zero variance");
  const double vx = n * sxx - sx * sx;
  const double vy = n * syy - sy * sy;
  if (!(vx > 0.0) || !(vy > 0.0)) throw UndefinedCorrelation("zero variance");
  const double r = (n * sxy - sx * sy) / (std::sqrt(vx) * std::sqrt(vy));
  return std::clamp(r, -1.0, 1.0);
}

struct SummaryStats {
  double mean = 0.0;
  double sd = 0.0;  // population (n denominator)
  double median = 0.0;
  double iqr25 = 0.0;
  double iqr75 = 0.0;
  std::size_t n = 0;
};

/// Type-7 quantile (linear interpolation between order statistics) of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline SummaryStats summary_stats(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("summary_stats: empty input");
  std::sort(values.begin(), values.end());
  SummaryStats s;
  s.n = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / static_cast<double>(s.n));
  s.median = quantile_sorted(values, 0.5);
  s.iqr25 = quantile_sorted(values, 0.25);
  s.iqr75 = quantile_sorted(values, 0.75);
  return s;
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr const char* kQuantReportSchema = "lungquant.quant_report/v1";
inline constexpr const char* kEvaluationRowSchema = "lungquant.evaluation_row/v1";

struct QuantOptions {
  HuRange ggo = kDefaultGgoRange;
  HuRange consolidation = kDefaultConsolidationRange;
  std::vector<double> histogram_edges = default_hu_edges();
};

struct QuantReport {
  QuantOptions options;
  double infection_volume_cm3 = 0.0;
  double lung_volume_cm3 = 0.0;
  PoiBreakdown poi;
  Histogram hu_histogram;
  std::int64_t ggo_voxels = 0;
  std::int64_t consolidation_voxels = 0;
  std::int64_t other_voxels = 0;
  double ggo_volume_cm3 = 0.0;
  double consolidation_volume_cm3 = 0.0;
  double other_volume_cm3 = 0.0;
  double ggo_poi = 0.0;
  double consolidation_poi = 0.0;
  int infected_lobes = 0;
  int infected_segments = 0;
};

inline QuantReport quantify(const Volume& volume, const LabelMask& infection, const RegionSet& regions,
                            const QuantOptions& options = {}) {
  require_same_geometry(volume.geometry(), infection.geometry(), "quantify: volume vs infection");
  require_same_geometry(volume.geometry(), regions.geometry(), "quantify: volume vs regions");
  QuantReport q;
  q.options = options;
  q.poi = poi_breakdown(infection, regions);
  q.infection_volume_cm3 = infection_volume(infection);
  q.lung_volume_cm3 = infection_volume(regions.lung);
  q.hu_histogram = hu_histogram(volume, infection, options.histogram_edges);
  const auto split = ggo_consolidation_split(volume, infection, options.ggo, options.consolidation, &regions.lung);
  q.ggo_voxels = split.ggo_voxels;
  q.consolidation_voxels = split.consolidation_voxels;
  q.other_voxels = split.other_voxels;
  q.ggo_volume_cm3 = split.ggo_volume_cm3;
  q.consolidation_volume_cm3 = split.consolidation_volume_cm3;
  q.other_volume_cm3 = split.other_volume_cm3;
  q.ggo_poi = *split.ggo_poi;
  q.consolidation_poi = *split.consolidation_poi;
  for (const auto& r : q.poi.lobes) q.infected_lobes += r.infected();
  for (const auto& r : q.poi.segments) q.infected_segments += r.infected();
  return q;
}

inline nlohmann::json to_json(const RegionPoi& r) {
  return {{"name", r.name},
          {"region_voxels", r.region_voxels},
          {"infected_voxels", r.infected_voxels},
          {"poi", r.poi},
          {"infected", r.infected()}};
}

inline nlohmann::json to_json(const QuantReport& q) {
  using nlohmann::json;
  json lobes = json::array(), segs = json::array();
  for (const auto& r : q.poi.lobes) lobes.push_back(to_json(r));
  for (const auto& r : q.poi.segments) segs.push_back(to_json(r));
  return {{"schema", kQuantReportSchema},
          {"settings",
           {{"ggo_range", {q.options.ggo.lo, q.options.ggo.hi}},
            {"consolidation_range", {q.options.consolidation.lo, q.options.consolidation.hi}},
            {"histogram_edges", q.options.histogram_edges}}},
          {"infection_volume_cm3", q.infection_volume_cm3},
          {"lung_volume_cm3", q.lung_volume_cm3},
          {"poi_whole_lung", to_json(q.poi.lung)},
          {"poi_per_lobe", lobes},
          {"poi_per_segment", segs},
          {"hu_histogram",
           {{"edges", q.hu_histogram.edges},
            {"counts", q.hu_histogram.counts},
            {"underflow", q.hu_histogram.underflow},
            {"overflow", q.hu_histogram.overflow}}},
          {"ggo", {{"voxels", q.ggo_voxels}, {"volume_cm3", q.ggo_volume_cm3}, {"poi", q.ggo_poi}}},
          {"consolidation",
           {{"voxels", q.consolidation_voxels},
            {"volume_cm3", q.consolidation_volume_cm3},
            {"poi", q.consolidation_poi}}},
          {"other", {{"voxels", q.other_voxels}, {"volume_cm3", q.other_volume_cm3}}},
          {"infected_region_counts", {{"lobes", q.infected_lobes}, {"segments", q.infected_segments}}}};
}

/// One case of a reference-versus-automatic comparison.
struct EvaluationRow {
  std::string case_id;
  double dice = 0.0;
  double volume_error_cm3 = 0.0;
  double poi_error_lung = 0.0;
  std::array<double, kLobeCount> poi_error_lobes{};
  std::array<double, kSegmentCount> poi_error_segments{};
  bool reference_lung_infected = false;
  std::array<bool, kLobeCount> reference_lobe_infected{};
  std::array<bool, kSegmentCount> reference_segment_infected{};
};

inline EvaluationRow compare_masks(const LabelMask& reference, const LabelMask& predicted, const Volume& volume,
                                   const RegionSet& regions, std::string case_id = {}) {
  require_same_geometry(reference.geometry(), predicted.geometry(), "compare_masks: reference vs predicted");
  require_same_geometry(reference.geometry(), volume.geometry(), "compare_masks: reference vs volume");
  require_same_geometry(reference.geometry(), regions.geometry(), "compare_masks: reference vs regions");
  EvaluationRow row;
  row.case_id = std::move(case_id);
  row.dice = dice(reference, predicted);
  row.volume_error_cm3 = std::abs(infection_volume(reference) - infection_volume(predicted));
  const auto r = poi_breakdown(reference, regions);
  const auto s = poi_breakdown(predicted, regions);
  row.poi_error_lung = std::abs(r.lung.poi - s.lung.poi);
  row.reference_lung_infected = r.lung.infected();
  for (int i = 0; i < kLobeCount; ++i) {
    row.poi_error_lobes[i] = std::abs(r.lobes[i].poi - s.lobes[i].poi);
    row.reference_lobe_infected[i] = r.lobes[i].infected();
  }
  for (int i = 0; i < kSegmentCount; ++i) {
    row.poi_error_segments[i] = std::abs(r.segments[i].poi - s.segments[i].poi);
    row.reference_segment_infected[i] = r.segments[i].infected();
  }
  return row;
}

inline nlohmann::json to_json(const EvaluationRow& row) {
  using nlohmann::json;
  json lobes = json::object(), segs = json::object();
  for (int i = 0; i < kLobeCount; ++i) lobes[lobe_names()[i]] = row.poi_error_lobes[i];
  for (int i = 0; i < kSegmentCount; ++i) segs[segment_names()[i]] = row.poi_error_segments[i];
  return {{"schema", kEvaluationRowSchema},  {"case_id", row.case_id},
          {"dice", row.dice},                {"volume_error_cm3", row.volume_error_cm3},
          {"poi_error_lung", row.poi_error_lung}, {"poi_error_lobes", lobes},
          {"poi_error_segments", segs}};
}

/// Single-row CSV header and line with full-precision values.
inline std::string evaluation_csv_header() {
  std::string h = "case_id,dice,volume_error_cm3,poi_error_whole_lung";
  for (const auto& n : lobe_names()) h += ",poi_error " + n;
  for (const auto& n : segment_names()) h += ",poi_error " + n;
  return h;
}

inline std::string evaluation_csv_line(const EvaluationRow& row) {
  std::ostringstream os;
  os << std::setprecision(17) << row.case_id << ',' << row.dice << ',' << row.volume_error_cm3 << ','
     << row.poi_error_lung;
  for (double v : row.poi_error_lobes) os << ',' << v;
  for (double v : row.poi_error_segments) os << ',' << v;
  return os.str();
}

/// One line of the cohort accuracy table.
struct MetricSummary {
  std::string metric;
  bool percent = false;
  std::optional<SummaryStats> stats;  // empty when no case qualifies
};

/// Aggregates per-case rows into the cohort accuracy table. Dice and volume
/// rows cover every case; POI rows cover the cases in which the reference
/// marks that region as infected.
inline std::vector<MetricSummary> aggregate_rows(const std::vector<EvaluationRow>& rows) {
  std::vector<MetricSummary> out;
  auto collect = [&](std::string metric, bool percent, auto value, auto include) {
    std::vector<double> v;
    for (const auto& r : rows)
      if (include(r)) v.push_back(value(r));
    out.push_back({std::move(metric), percent, v.empty() ? std::nullopt : std::optional(summary_stats(v))});
  };
  auto all = [](const EvaluationRow&) { return true; };
  collect("Dice Similarity Coefficient", true, [](const EvaluationRow& r) { return 100.0 * r.dice; }, all);
  collect("Volume Estimation Error (cm3)", false, [](const EvaluationRow& r) { return r.volume_error_cm3; }, all);
  collect("POI (The whole lung)", true, [](const EvaluationRow& r) { return r.poi_error_lung; },
          [](const EvaluationRow& r) { return r.reference_lung_infected; });
  for (int i = 0; i < kLobeCount; ++i)
    collect("POI (" + lobe_names()[i] + ")", true, [i](const EvaluationRow& r) { return r.poi_error_lobes[i]; },
            [i](const EvaluationRow& r) { return r.reference_lobe_infected[i]; });
  for (int i = 0; i < kSegmentCount; ++i)
    collect("POI (" + segment_names()[i] + ")", true,
            [i](const EvaluationRow& r) { return r.poi_error_segments[i]; },
            [i](const EvaluationRow& r) { return r.reference_segment_infected[i]; });
  return out;
}

/// Renders the cohort table as CSV at 0.1 resolution.
inline std::string aggregate_csv(const std::vector<MetricSummary>& table) {
  std::ostringstream os;
  os << "Accuracy Metrics,Mean,SD,Median,25% IQR,75% IQR,N\n";
  auto cell = [](double v) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(1) << (std::abs(v) < 0.05 ? 0.0 : v);
    return c.str();
  };
  for (const auto& m : table) {
    os << '"' << m.metric << (m.percent ? " (%)" : "") << '"';
    if (!m.stats) {
      os << ",N/A,N/A,N/A,N/A,N/A,0\n";
      continue;
    }
    const auto& s = *m.stats;
    os << ',' << cell(s.mean) << ',' << cell(s.sd) << ',' << cell(s.median) << ',' << cell(s.iqr25) << ','
       << cell(s.iqr75) << ',' << s.n << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Longitudinal tracking

struct TimelinePoint {
  std::string date;
  double poi_whole_lung = 0.0;
  double infection_volume_cm3 = 0.0;
  double ggo_volume_cm3 = 0.0;
  double consolidation_volume_cm3 = 0.0;
  double ggo_poi = 0.0;
  double consolidation_poi = 0.0;
  /// Change against the previous scan; absent for the first entry.
  std::optional<double> delta_poi;
  std::optional<double> delta_infection_volume_cm3;
  std::optional<double> delta_ggo_volume_cm3;
  std::optional<double> delta_consolidation_volume_cm3;
};

inline bool is_iso_date(const std::string& d) {
  if (d.size() != 10 || d[4] != '-' || d[7] != '-') return false;
  for (int i : {0, 1, 2, 3, 5, 6, 8, 9})
    if (d[i] < '0' || d[i] > '9') return false;
  return true;
}

/// Per-scan severity and change between consecutive scans. Dates are ISO (YYYY-MM-DD).
inline std::vector<TimelinePoint> longitudinal_report(const std::vector<std::pair<std::string, QuantReport>>& series) {
  if (series.size() < 2) throw std::invalid_argument("longitudinal_report: need at least 2 scans");
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (!is_iso_date(series[i].first))
      throw std::invalid_argument("longitudinal_report: bad date " + series[i].first);
    if (i > 0 && !(series[i - 1].first < series[i].first))
      throw std::invalid_argument("longitudinal_report: dates must be strictly increasing");
  }
  std::vector<TimelinePoint> out;
  for (const auto& [date, q] : series) {
    TimelinePoint p;
    p.date = date;
    p.poi_whole_lung = q.poi.lung.poi;
    p.infection_volume_cm3 = q.infection_volume_cm3;
    p.ggo_volume_cm3 = q.ggo_volume_cm3;
    p.consolidation_volume_cm3 = q.consolidation_volume_cm3;
    p.ggo_poi = q.ggo_poi;
    p.consolidation_poi = q.consolidation_poi;
    if (!out.empty()) {
      const auto& prev = out.back();
      p.delta_poi = p.poi_whole_lung - prev.poi_whole_lung;
      p.delta_infection_volume_cm3 = p.infection_volume_cm3 - prev.infection_volume_cm3;
      p.delta_ggo_volume_cm3 = p.ggo_volume_cm3 - prev.ggo_volume_cm3;
      p.delta_consolidation_volume_cm3 = p.consolidation_volume_cm3 - prev.consolidation_volume_cm3;
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline nlohmann::json to_json(const std::vector<TimelinePoint>& timeline) {
  nlohmann::json a = nlohmann::json::array();
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  for (const auto& p : timeline)
    a.push_back({{"date", p.date},
                 {"poi_whole_lung", p.poi_whole_lung},
                 {"infection_volume_cm3", p.infection_volume_cm3},
                 {"ggo_volume_cm3", p.ggo_volume_cm3},
                 {"consolidation_volume_cm3", p.consolidation_volume_cm3},
                 {"ggo_poi", p.ggo_poi},
                 {"consolidation_poi", p.consolidation_poi},
                 {"delta_poi", opt(p.delta_poi)},
                 {"delta_infection_volume_cm3", opt(p.delta_infection_volume_cm3)},
                 {"delta_ggo_volume_cm3", opt(p.delta_ggo_volume_cm3)},
                 {"delta_consolidation_volume_cm3", opt(p.delta_consolidation_volume_cm3)}});
  return a;
}

/// Quantile summary per region across a cohort, as used for distribution plots.
inline nlohmann::json poi_distribution(const std::vector<QuantReport>& reports) {
  nlohmann::json out = nlohmann::json::object();
  auto summarize = [&](const std::string& name, auto get) {
    std::vector<double> v;
    for (const auto& q : reports) v.push_back(get(q));
    const auto s = summary_stats(v);
    out[name] = {{"mean", s.mean}, {"sd", s.sd},       {"median", s.median},
                 {"q25", s.iqr25}, {"q75", s.iqr75},   {"n", s.n}};
  };
  if (reports.empty()) return out;
  for (int i = 0; i < kLobeCount; ++i)
    summarize(lobe_names()[i], [i](const QuantReport& q) { return q.poi.lobes[i].poi; });
  for (int i = 0; i < kSegmentCount; ++i)
    summarize(segment_names()[i], [i](const QuantReport& q) { return q.poi.segments[i].poi; });
  return out;
}

}  // namespace lungquant
