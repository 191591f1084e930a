#pragma once

// Single-file NIfTI-1 (.nii / .nii.gz) reading and writing, label-name
// sidecars and HU display windowing.

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "lungquant/grid.hpp"

namespace lungquant {

namespace nifti {

inline constexpr int kHeaderSize = 348;
inline constexpr int kVoxOffset = 352;
inline constexpr std::int16_t kUint8 = 2;
inline constexpr std::int16_t kInt16 = 4;
inline constexpr std::int16_t kFloat32 = 16;

enum class ErrorCode {
  io,
  malformed_header,
  unsupported_datatype,
  bad_dimensions,
  unsupported_orientation,
  truncated,
  bad_sidecar,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::io: return "io";
    case ErrorCode::malformed_header: return "malformed_header";
    case ErrorCode::unsupported_datatype: return "unsupported_datatype";
    case ErrorCode::bad_dimensions: return "bad_dimensions";
    case ErrorCode::unsupported_orientation: return "unsupported_orientation";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::bad_sidecar: return "bad_sidecar";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string field, const std::string& detail)
      : std::runtime_error(std::string("nifti ") + to_string(code) + " [" + field + "]: " + detail),
        code_(code),
        field_(std::move(field)) {}

  ErrorCode code() const { return code_; }
  /// Header field (or file aspect) responsible for the failure.
  const std::string& field() const { return field_; }

 private:
  ErrorCode code_;
  std::string field_;
};

namespace detail {

template <typename T>
T get(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void put(std::uint8_t* p, T v) {
  std::memcpy(p, &v, sizeof(T));
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Reads the whole file, inflating gzip streams; plain files pass through.
inline std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw Error(ErrorCode::io, "path", "cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf{};
  for (;;) {
    const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      gzclose(f);
      throw Error(ErrorCode::truncated, "stream", "corrupt compressed stream in " + path.string());
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

inline void dump(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (ends_with(path.string(), ".gz")) {
    gzFile f = gzopen(path.string().c_str(), "wb9");
    if (!f) throw Error(ErrorCode::io, "path", "cannot write " + path.string());
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    const int rc = gzclose(f);
    if (n != static_cast<int>(bytes.size()) || rc != Z_OK)
      throw Error(ErrorCode::io, "path", "short write to " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "path", "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "path", "short write to " + path.string());
}

}  // namespace detail

/// Decoded header fields the rest of the library cares about.
struct Header {
  Geometry geometry;
  std::int16_t datatype = kFloat32;
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::size_t vox_offset = kVoxOffset;
  std::string descrip;
};

/// Raw image: header plus scaled voxel values in storage order.
struct Image {
  Header header;
  std::vector<double> values;
};

inline Header parse_header(const std::vector<std::uint8_t>& bytes) {
  using detail::get;
  if (bytes.size() < static_cast<std::size_t>(kHeaderSize))
    throw Error(ErrorCode::truncated, "sizeof_hdr", "file shorter than 348-byte header");
  const std::uint8_t* h = bytes.data();
  const auto sizeof_hdr = get<std::int32_t>(h + 0);
  if (sizeof_hdr != kHeaderSize)
    throw Error(ErrorCode::malformed_header, "sizeof_hdr",
                "expected 348, found " + std::to_string(sizeof_hdr));
  if (std::memcmp(h + 344, "n+1\0", 4) != 0)
    throw Error(ErrorCode::malformed_header, "magic", "expected single-file magic n+1");

  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = get<std::int16_t>(h + 40 + 2 * i);
  if (dim[0] != 3)
    throw Error(ErrorCode::bad_dimensions, "dim[0]",
                "expected 3 dimensions, found " + std::to_string(dim[0]));
  for (int i = 1; i <= 3; ++i)
    if (dim[i] <= 0)
      throw Error(ErrorCode::bad_dimensions, "dim[" + std::to_string(i) + "]", "must be positive");

  Header out;
  out.datatype = get<std::int16_t>(h + 70);
  if (out.datatype != kUint8 && out.datatype != kInt16 && out.datatype != kFloat32)
    throw Error(ErrorCode::unsupported_datatype, "datatype",
                "code " + std::to_string(out.datatype) + " (accepted: 2, 4, 16)");
  const auto bitpix = get<std::int16_t>(h + 72);
  const int expected_bitpix = out.datatype == kUint8 ? 8 : out.datatype == kInt16 ? 16 : 32;
  if (bitpix != expected_bitpix)
    throw Error(ErrorCode::malformed_header, "bitpix",
                "inconsistent with datatype: " + std::to_string(bitpix));

  std::array<float, 8> pixdim{};
  for (int i = 0; i < 8; ++i) pixdim[i] = get<float>(h + 76 + 4 * i);
  for (int i = 1; i <= 3; ++i) {
    if (!(pixdim[i] > 0.0f) || !std::isfinite(pixdim[i]))
      throw Error(ErrorCode::malformed_header, "pixdim[" + std::to_string(i) + "]",
                  "spacing must be positive");
  }

  const float vox_offset = get<float>(h + 108);
  if (!(vox_offset >= static_cast<float>(kVoxOffset)))
    throw Error(ErrorCode::malformed_header, "vox_offset", "must be at least 352");
  out.vox_offset = static_cast<std::size_t>(vox_offset);

  out.scl_slope = get<float>(h + 112);
  out.scl_inter = get<float>(h + 116);
  // slope 0 means "no scaling" in NIfTI-1.
  if (out.scl_slope == 0.0f || !std::isfinite(out.scl_slope)) {
    out.scl_slope = 1.0f;
    out.scl_inter = 0.0f;
  }
  if (!std::isfinite(out.scl_inter)) out.scl_inter = 0.0f;

  const auto qform_code = get<std::int16_t>(h + 252);
  const auto sform_code = get<std::int16_t>(h + 254);
  std::array<double, 3> origin{0.0, 0.0, 0.0};
  if (sform_code > 0) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        const float v = get<float>(h + 280 + 16 * r + 4 * c);
        if (r != c && v != 0.0f)
          throw Error(ErrorCode::unsupported_orientation, "srow", "rotated affines are not supported");
      }
      origin[r] = get<float>(h + 280 + 16 * r + 12);
    }
  } else if (qform_code > 0) {
    for (int i = 0; i < 3; ++i)
      if (get<float>(h + 256 + 4 * i) != 0.0f)
        throw Error(ErrorCode::unsupported_orientation, "quatern", "rotated affines are not supported");
    for (int i = 0; i < 3; ++i) origin[i] = get<float>(h + 268 + 4 * i);
  }

  out.geometry.dims = {dim[1], dim[2], dim[3]};
  out.geometry.spacing = {pixdim[1], pixdim[2], pixdim[3]};
  out.geometry.origin = origin;

  const char* d = reinterpret_cast<const char*>(h + 148);
  out.descrip.assign(d, strnlen(d, 80));
  return out;
}

inline std::vector<std::uint8_t> encode_header(const Geometry& g, std::int16_t datatype,
                                               float slope, float inter,
                                               const std::string& descrip) {
  using detail::put;
  std::vector<std::uint8_t> b(kVoxOffset, 0);
  std::uint8_t* h = b.data();
  put<std::int32_t>(h + 0, kHeaderSize);
  put<char>(h + 38, 'r');  // regular
  const std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(g.dims[0]),
                                        static_cast<std::int16_t>(g.dims[1]),
                                        static_cast<std::int16_t>(g.dims[2]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(h + 40 + 2 * i, dim[i]);
  put(h + 70, datatype);
  put<std::int16_t>(h + 72, datatype == kUint8 ? 8 : datatype == kInt16 ? 16 : 32);
  const std::array<float, 8> pixdim{1.0f, static_cast<float>(g.spacing[0]),
                                    static_cast<float>(g.spacing[1]),
                                    static_cast<float>(g.spacing[2]), 0, 0, 0, 0};
  for (int i = 0; i < 8; ++i) put(h + 76 + 4 * i, pixdim[i]);
  put<float>(h + 108, static_cast<float>(kVoxOffset));
  put<float>(h + 112, slope);
  put<float>(h + 116, inter);
  put<char>(h + 123, 2);  // xyzt_units: mm
  std::memcpy(h + 148, descrip.data(), std::min<std::size_t>(descrip.size(), 79));
  put<std::int16_t>(h + 252, 1);  // qform_code: scanner
  put<std::int16_t>(h + 254, 1);  // sform_code: scanner
  for (int i = 0; i < 3; ++i) put<float>(h + 268 + 4 * i, static_cast<float>(g.origin[i]));
  for (int r = 0; r < 3; ++r) {
    put<float>(h + 280 + 16 * r + 4 * r, static_cast<float>(g.spacing[r]));
    put<float>(h + 280 + 16 * r + 12, static_cast<float>(g.origin[r]));
  }
  std::memcpy(h + 344, "n+1\0", 4);
  return b;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& image_path) {
  std::string s = image_path.string();
  for (const char* ext : {".nii.gz", ".nii"}) {
    if (detail::ends_with(s, ext)) {
      s.resize(s.size() - std::strlen(ext));
      break;
    }
  }
  return s + ".labels.json";
}

inline std::optional<LabelMask::Names> read_sidecar(const std::filesystem::path& image_path) {
  const auto p = sidecar_path(image_path);
  if (!std::filesystem::exists(p)) return std::nullopt;
  std::ifstream in(p);
  LabelMask::Names names;
  try {
    const auto j = nlohmann::json::parse(in);
    if (!j.is_object()) throw Error(ErrorCode::bad_sidecar, "sidecar", "expected a JSON object");
    for (const auto& [k, v] : j.items()) names[std::stoi(k)] = v.get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::bad_sidecar, "sidecar", e.what());
  } catch (const std::logic_error& e) {
    throw Error(ErrorCode::bad_sidecar, "sidecar", e.what());
  }
  return names;
}

inline void write_sidecar(const std::filesystem::path& image_path, const LabelMask::Names& names) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : names) j[std::to_string(k)] = v;
  std::ofstream out(sidecar_path(image_path), std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "sidecar", "cannot write label sidecar");
  out << j.dump(2) << '\n';
}

/// Reads any supported single-file NIfTI-1 image into scaled values.
inline Image read_image(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  Image img;
  img.header = parse_header(bytes);
  const auto& hd = img.header;
  const std::size_t n = hd.geometry.voxel_count();
  const std::size_t width = hd.datatype == kUint8 ? 1 : hd.datatype == kInt16 ? 2 : 4;
  if (bytes.size() < hd.vox_offset + n * width)
    throw Error(ErrorCode::truncated, "data", "voxel payload shorter than dims imply");
  const std::uint8_t* p = bytes.data() + hd.vox_offset;
  img.values.resize(n);
  const double slope = hd.scl_slope;
  const double inter = hd.scl_inter;
  for (std::size_t i = 0; i < n; ++i) {
    double raw = 0.0;
    switch (hd.datatype) {
      case kUint8: raw = p[i]; break;
      case kInt16: raw = detail::get<std::int16_t>(p + 2 * i); break;
      default: raw = detail::get<float>(p + 4 * i); break;
    }
    img.values[i] = hd.datatype == kFloat32 && slope == 1.0 && inter == 0.0 ? raw : slope * raw + inter;
  }
  return img;
}

}  // namespace nifti

/// Outcome details of a volume load.
struct LoadReport {
  std::size_t clamped_voxels = 0;
};

inline Volume read_volume(const std::filesystem::path& path, LoadReport* report = nullptr) {
  auto img = nifti::read_image(path);
  std::vector<float> hu(img.values.begin(), img.values.end());
  Volume v(img.header.geometry, std::move(hu));
  if (report) report->clamped_voxels = v.clamped_voxels();
  return v;
}

/// Loads an integer-typed image as a label map. Names come from the sidecar
/// when present; otherwise every nonzero label gets a generic name.
inline LabelMask read_label_mask(const std::filesystem::path& path) {
  auto img = nifti::read_image(path);
  if (img.header.datatype == nifti::kFloat32)
    throw nifti::Error(nifti::ErrorCode::unsupported_datatype, "datatype",
                       "label maps must be integer typed");
  std::vector<std::uint8_t> labels(img.values.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double v = img.values[i];
    if (v < 0.0 || v > 255.0 || v != std::floor(v))
      throw nifti::Error(nifti::ErrorCode::unsupported_datatype, "data",
                         "label values must be integers in [0, 255]");
    labels[i] = static_cast<std::uint8_t>(v);
  }
  LabelMask m(img.header.geometry, std::move(labels));
  if (auto sidecar = nifti::read_sidecar(path)) {
    m.set_label_names(std::move(*sidecar));
  } else {
    LabelMask::Names generic;
    std::array<bool, 256> seen{};
    for (auto l : m.values()) seen[l] = true;
    for (int l = 1; l < 256; ++l)
      if (seen[l]) generic[l] = "label " + std::to_string(l);
    m.set_label_names(std::move(generic));
  }
  if (!m.names_cover_labels())
    throw nifti::Error(nifti::ErrorCode::bad_sidecar, "sidecar", "a nonzero label has no name");
  return m;
}

using AnyGrid = std::variant<Volume, LabelMask>;

/// Integer files with a label sidecar load as LabelMask, everything else as Volume.
inline AnyGrid read_nifti(const std::filesystem::path& path) {
  auto img = nifti::read_image(path);
  if (img.header.datatype != nifti::kFloat32 && nifti::read_sidecar(path)) return read_label_mask(path);
  std::vector<float> hu(img.values.begin(), img.values.end());
  return Volume(img.header.geometry, std::move(hu));
}

inline void write_nifti(const Volume& v, const std::filesystem::path& path,
                        const std::string& descrip = {}) {
  auto bytes = nifti::encode_header(v.geometry(), nifti::kFloat32, 1.0f, 0.0f, descrip);
  const auto data = v.data();
  const std::size_t off = bytes.size();
  bytes.resize(off + data.size() * sizeof(float));
  std::memcpy(bytes.data() + off, data.data(), data.size() * sizeof(float));
  nifti::detail::dump(path, bytes);
}

inline void write_nifti(const LabelMask& m, const std::filesystem::path& path,
                        const std::string& descrip = {}) {
  auto bytes = nifti::encode_header(m.geometry(), nifti::kUint8, 1.0f, 0.0f, descrip);
  const auto data = m.data();
  bytes.insert(bytes.end(), data.begin(), data.end());
  nifti::detail::dump(path, bytes);
  if (!m.label_names().empty()) nifti::write_sidecar(path, m.label_names());
}

/// Lung reading window.
inline constexpr double kLungWindowLevel = -600.0;
inline constexpr double kLungWindowWidth = 1200.0;
/// Mediastinal reading window.
inline constexpr double kMediastinalWindowLevel = 40.0;
inline constexpr double kMediastinalWindowWidth = 350.0;

inline double window_value(double hu, double level, double width) {
  return std::clamp((hu - (level - width / 2.0)) / width, 0.0, 1.0);
}

/// Maps HU linearly onto [0, 1] across the window, clamping outside it.
inline Grid<float> apply_window(const Volume& v, double level = kLungWindowLevel,
                                double width = kLungWindowWidth) {
  if (!(width > 0.0)) throw std::invalid_argument("apply_window: width must be positive");
  Grid<float> out(v.geometry(), 0.0f);
  const auto in = v.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < in.size(); ++i)
    dst[i] = static_cast<float>(window_value(in[i], level, width));
  return out;
}

}  // namespace lungquant
