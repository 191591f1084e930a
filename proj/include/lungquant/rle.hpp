#pragma once

// Run-length encoding of binary masks, per 2-D slice. Runs are (start, length)
// pairs over the row-major pixels of a slice; only nonzero pixels are encoded.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lungquant/grid.hpp"

namespace lungquant::rle {

using Run = std::pair<std::int64_t, std::int64_t>;
using Runs = std::vector<Run>;

class Error : public std::invalid_argument {
 public:
  explicit Error(const std::string& what) : std::invalid_argument("rle: " + what) {}
};

inline Runs encode(const std::vector<std::uint8_t>& pixels) {
  Runs runs;
  const auto n = static_cast<std::int64_t>(pixels.size());
  for (std::int64_t i = 0; i < n;) {
    if (!pixels[i]) {
      ++i;
      continue;
    }
    std::int64_t j = i;
    while (j < n && pixels[j]) ++j;
    runs.push_back({i, j - i});
    i = j;
  }
  return runs;
}

/// Runs must be positive-length, sorted, non-overlapping and within `n`.
inline std::vector<std::uint8_t> decode(const Runs& runs, std::int64_t n) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n), 0);
  std::int64_t end = 0;
  for (const auto& [start, len] : runs) {
    if (len <= 0) throw Error("run length must be positive");
    if (start < end) throw Error("runs must be sorted and non-overlapping");
    if (start + len > n) throw Error("run exceeds slice bounds");
    std::fill(out.begin() + start, out.begin() + start + len, 1);
    end = start + len;
  }
  return out;
}

enum class Axis { x, y, z };

inline Axis parse_axis(const std::string& s) {
  if (s == "x") return Axis::x;
  if (s == "y") return Axis::y;
  if (s == "z") return Axis::z;
  throw Error("axis must be x, y or z");
}

/// A 2-D cut through a grid. For axis z rows run along y and columns along x;
/// for axis y rows are z and columns x; for axis x rows are z and columns y.
struct SliceShape {
  int width = 0;
  int height = 0;
};

inline SliceShape slice_shape(const Geometry& g, Axis axis) {
  switch (axis) {
    case Axis::z: return {g.dims[0], g.dims[1]};
    case Axis::y: return {g.dims[0], g.dims[2]};
    case Axis::x: return {g.dims[1], g.dims[2]};
  }
  return {};
}

inline int axis_extent(const Geometry& g, Axis axis) {
  return g.dims[axis == Axis::x ? 0 : axis == Axis::y ? 1 : 2];
}

inline std::size_t slice_voxel(const Geometry& g, Axis axis, int index, int row, int col) {
  switch (axis) {
    case Axis::z: return g.index(col, row, index);
    case Axis::y: return g.index(col, index, row);
    case Axis::x: return g.index(index, col, row);
  }
  return 0;
}

template <typename T>
std::vector<T> extract_slice(const Grid<T>& grid, Axis axis, int index) {
  const auto& g = grid.geometry();
  if (index < 0 || index >= axis_extent(g, axis)) throw Error("slice index out of range");
  const auto s = slice_shape(g, axis);
  std::vector<T> out(static_cast<std::size_t>(s.width) * s.height);
  for (int r = 0; r < s.height; ++r)
    for (int c = 0; c < s.width; ++c) out[static_cast<std::size_t>(r) * s.width + c] = grid[slice_voxel(g, axis, index, r, c)];
  return out;
}

inline nlohmann::json slice_json(const LabelMask& mask, Axis axis, int index) {
  const auto s = slice_shape(mask.geometry(), axis);
  auto px = extract_slice(mask, axis, index);
  for (auto& v : px) v = v ? 1 : 0;
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& [a, b] : encode(px)) runs.push_back({a, b});
  const char* names[] = {"x", "y", "z"};
  return {{"axis", names[static_cast<int>(axis)]}, {"index", index}, {"width", s.width}, {"height", s.height}, {"runs", runs}};
}

/// Whole binary mask as one run list per axial (z) slice.
inline nlohmann::json mask_json(const LabelMask& mask) {
  const auto& g = mask.geometry();
  nlohmann::json slices = nlohmann::json::array();
  for (int z = 0; z < g.dims[2]; ++z) {
    nlohmann::json runs = nlohmann::json::array();
    std::vector<std::uint8_t> px(mask.data().begin() + static_cast<std::ptrdiff_t>(g.index(0, 0, z)),
                                 mask.data().begin() + static_cast<std::ptrdiff_t>(g.index(0, 0, z) + static_cast<std::size_t>(g.dims[0]) * g.dims[1]));
    for (const auto& [a, b] : encode(px)) runs.push_back({a, b});
    slices.push_back(std::move(runs));
  }
  return {{"dims", g.dims}, {"slices", slices}};
}

/// Inverse of mask_json onto `geometry`; the encoded dims must match.
inline LabelMask mask_from_json(const nlohmann::json& j, const Geometry& geometry, std::string name = "infection") {
  if (!j.is_object() || !j.contains("dims") || !j.contains("slices")) throw Error("expected {dims, slices}");
  std::array<int, 3> dims;
  try {
    dims = j.at("dims").get<std::array<int, 3>>();
  } catch (const nlohmann::json::exception&) {
    throw Error("dims must be three integers");
  }
  if (dims != geometry.dims) throw GeometryMismatch("rle mask dims differ from the volume");
  const auto& slices = j.at("slices");
  if (!slices.is_array() || static_cast<int>(slices.size()) != dims[2]) throw Error("expected one run list per z slice");
  LabelMask m = LabelMask::binary(geometry, std::move(name));
  const std::int64_t plane = static_cast<std::int64_t>(dims[0]) * dims[1];
  for (int z = 0; z < dims[2]; ++z) {
    Runs runs;
    try {
      for (const auto& r : slices[static_cast<std::size_t>(z)]) runs.push_back({r.at(0).get<std::int64_t>(), r.at(1).get<std::int64_t>()});
    } catch (const nlohmann::json::exception&) {
      throw Error("runs must be [start, length] integer pairs");
    }
    const auto px = decode(runs, plane);
    std::copy(px.begin(), px.end(), m.data().begin() + static_cast<std::ptrdiff_t>(geometry.index(0, 0, z)));
  }
  return m;
}

}  // namespace lungquant::rle
