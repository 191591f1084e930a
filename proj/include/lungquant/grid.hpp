#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lungquant {

/// Axis-aligned voxel lattice: extent, voxel size in mm and world origin in mm.
struct Geometry {
  std::array<int, 3> dims{1, 1, 1};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::array<double, 3> origin{0.0, 0.0, 0.0};

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  double voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }

  /// Linear index with x fastest (NIfTI storage order).
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(y) +
                                                static_cast<std::size_t>(dims[1]) * z);
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] <= 0) throw std::invalid_argument("geometry: dims must be positive");
      if (!(spacing[a] > 0.0)) throw std::invalid_argument("geometry: spacing must be positive");
    }
  }

  bool operator==(const Geometry&) const = default;
};

class GeometryMismatch : public std::invalid_argument {
 public:
  explicit GeometryMismatch(const std::string& what)
      : std::invalid_argument("geometry mismatch: " + what) {}
};

inline void require_same_geometry(const Geometry& a, const Geometry& b, const char* context) {
  if (!(a == b)) throw GeometryMismatch(context);
}

template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  explicit Grid(Geometry geometry, T fill = T{})
      : geometry_(geometry), data_((geometry.validate(), geometry.voxel_count()), fill) {}
  Grid(Geometry geometry, std::vector<T> data) : geometry_(geometry), data_(std::move(data)) {
    geometry_.validate();
    if (data_.size() != geometry_.voxel_count())
      throw std::invalid_argument("grid: data length does not match dims");
  }

  const Geometry& geometry() const { return geometry_; }
  const std::array<int, 3>& dims() const { return geometry_.dims; }
  std::size_t size() const { return data_.size(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(int x, int y, int z) { return data_[geometry_.index(x, y, z)]; }
  const T& at(int x, int y, int z) const { return data_[geometry_.index(x, y, z)]; }

  bool operator==(const Grid&) const = default;

 protected:
  Geometry geometry_;
  std::vector<T> data_;
};

/// Mirror index into [0, n) without repeating the edge sample (numpy "reflect").
/// Valid for i in [-(n-1), 2n-2].
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  if (i < 0) i = -i;
  if (i >= n) i = 2 * (n - 1) - i;
  return i;
}

inline constexpr float kHuMin = -1024.0f;
inline constexpr float kHuMax = 3071.0f;

/// CT intensities in Hounsfield units, clamped to the 12-bit range on construction.
class Volume : public Grid<float> {
 public:
  Volume() = default;
  explicit Volume(Geometry geometry, float fill = kHuMin)
      : Grid<float>(geometry, std::clamp(fill, kHuMin, kHuMax)) {}
  Volume(Geometry geometry, std::vector<float> hu) : Grid<float>(geometry, std::move(hu)) {
    clamped_ = clamp_hu(data_);
  }

  /// Number of voxels pulled into [kHuMin, kHuMax] when this volume was built.
  std::size_t clamped_voxels() const { return clamped_; }

  static std::size_t clamp_hu(std::span<float> values) {
    std::size_t n = 0;
    for (auto& v : values) {
      const float c = std::clamp(v, kHuMin, kHuMax);
      if (c != v) {
        v = c;
        ++n;
      }
    }
    return n;
  }

  bool operator==(const Volume& o) const { return Grid<float>::operator==(o); }

 private:
  std::size_t clamped_ = 0;
};

/// Integer label map aligned to a Volume. 0 is background.
class LabelMask : public Grid<std::uint8_t> {
 public:
  using Names = std::map<int, std::string>;

  LabelMask() = default;
  explicit LabelMask(Geometry geometry, Names names = {})
      : Grid<std::uint8_t>(geometry, 0), names_(std::move(names)) {}
  LabelMask(Geometry geometry, std::vector<std::uint8_t> labels, Names names = {})
      : Grid<std::uint8_t>(geometry, std::move(labels)), names_(std::move(names)) {}

  /// Binary infection-style mask with label 1 named `name`.
  static LabelMask binary(Geometry geometry, std::string name = "infection") {
    return LabelMask(geometry, Names{{1, std::move(name)}});
  }

  const Names& label_names() const { return names_; }
  void set_label_names(Names names) { names_ = std::move(names); }

  std::size_t count_nonzero() const {
    return static_cast<std::size_t>(
        std::count_if(data_.begin(), data_.end(), [](std::uint8_t v) { return v != 0; }));
  }
  std::size_t count_label(int label) const {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), label));
  }

  /// Every nonzero label present in the map must be named.
  bool names_cover_labels() const {
    std::array<bool, 256> seen{};
    for (auto v : data_) seen[v] = true;
    for (int l = 1; l < 256; ++l)
      if (seen[l] && !names_.contains(l)) return false;
    return true;
  }

  /// Binary mask of voxels carrying `label`.
  LabelMask select(int label, std::string name = {}) const {
    LabelMask out = binary(geometry_, name.empty() ? label_name(label) : std::move(name));
    for (std::size_t i = 0; i < data_.size(); ++i) out.data_[i] = data_[i] == label ? 1 : 0;
    return out;
  }

  std::string label_name(int label) const {
    auto it = names_.find(label);
    return it == names_.end() ? "label " + std::to_string(label) : it->second;
  }

  bool operator==(const LabelMask& o) const {
    return Grid<std::uint8_t>::operator==(o) && names_ == o.names_;
  }

 private:
  Names names_;
};

}  // namespace lungquant
