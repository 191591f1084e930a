#pragma once

// On-disk cohort layout shared by the command-line tools:
//
//   <dir>/manifest.json
//   <dir>/<id>_ct.nii.gz           HU volume
//   <dir>/<id>_infection.nii.gz    binary infection mask
//   <dir>/<id>_segments.nii.gz     segment label map (+ .labels.json sidecar)

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lungquant/phantom.hpp"
#include "lungquant/quantify.hpp"
#include "lungquant/volume_io.hpp"

namespace lungquant {

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kManifestSchema = "lungquant.dataset/v1";

class DatasetError : public std::invalid_argument {
 public:
  explicit DatasetError(const std::string& what) : std::invalid_argument("dataset: " + what) {}
};

struct DatasetCase {
  std::string id;
  std::string volume;
  std::string infection;
  std::string regions;
  std::int64_t ggo_voxels = 0;
  std::int64_t consolidation_voxels = 0;
};

struct Manifest {
  nlohmann::json generator;
  std::vector<DatasetCase> cases;

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& c : cases) out.push_back(c.id);
    return out;
  }
  const DatasetCase& find(const std::string& id) const {
    for (const auto& c : cases)
      if (c.id == id) return c;
    throw DatasetError("no case " + id + " in manifest");
  }
};

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : m.cases)
    cases.push_back({{"id", c.id},
                     {"volume", c.volume},
                     {"infection", c.infection},
                     {"regions", c.regions},
                     {"ggo_voxels", c.ggo_voxels},
                     {"consolidation_voxels", c.consolidation_voxels}});
  return {{"schema", kManifestSchema}, {"count", m.cases.size()}, {"generator", m.generator}, {"cases", cases}};
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(path.string() + " is not valid JSON: " + e.what());
  }
}

/// Writes every cohort case and the manifest into `dir`.
inline Manifest write_dataset(const std::filesystem::path& dir, const std::vector<CohortCase>& cohort,
                              const nlohmann::json& generator) {
  std::filesystem::create_directories(dir);
  Manifest m;
  m.generator = generator;
  for (const auto& c : cohort) {
    DatasetCase d{c.id, c.id + "_ct.nii.gz", c.id + "_infection.nii.gz", c.id + "_segments.nii.gz",
                  c.phantom.ggo_voxels, c.phantom.consolidation_voxels};
    write_nifti(c.phantom.volume, dir / d.volume, "lungquant phantom " + c.id);
    write_nifti(c.phantom.infection, dir / d.infection, "lungquant infection " + c.id);
    write_nifti(c.phantom.regions.segments, dir / d.regions, "lungquant segments " + c.id);
    m.cases.push_back(std::move(d));
  }
  write_json_file(dir / kManifestName, to_json(m));
  return m;
}

inline Manifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kManifestName;
  if (!std::filesystem::exists(path)) throw DatasetError("missing " + path.string());
  const auto j = read_json_file(path);
  try {
    if (j.at("schema") != kManifestSchema) throw DatasetError("unknown manifest schema");
    Manifest m;
    m.generator = j.value("generator", nlohmann::json::object());
    for (const auto& c : j.at("cases"))
      m.cases.push_back({c.at("id"), c.at("volume"), c.at("infection"), c.at("regions"), c.value("ggo_voxels", 0),
                         c.value("consolidation_voxels", 0)});
    if (m.cases.empty()) throw DatasetError("manifest lists no cases");
    if (j.contains("count") && j["count"].get<std::size_t>() != m.cases.size())
      throw DatasetError("manifest count disagrees with its case list");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("malformed manifest: ") + e.what());
  }
}

/// Segment label map on disk turned into validated regions.
inline RegionSet read_regions(const std::filesystem::path& path) {
  auto r = RegionSet::from_segments(read_label_mask(path));
  r.validate();
  return r;
}

struct LoadedCase {
  std::string id;
  Volume volume;
  LabelMask infection;
  RegionSet regions;
};

inline LoadedCase load_case(const std::filesystem::path& dir, const DatasetCase& c) {
  LoadedCase out{c.id, read_volume(dir / c.volume), read_label_mask(dir / c.infection), read_regions(dir / c.regions)};
  require_same_geometry(out.volume.geometry(), out.infection.geometry(), ("dataset case " + c.id).c_str());
  require_same_geometry(out.volume.geometry(), out.regions.geometry(), ("dataset case " + c.id).c_str());
  return out;
}

}  // namespace lungquant
