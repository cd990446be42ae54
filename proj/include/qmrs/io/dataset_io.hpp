#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "qmrs/error.hpp"
#include "qmrs/io/png.hpp"
#include "qmrs/types.hpp"

// Dataset directory: manifest.json + images/<id>.png (8-bit RGB) +
// masks/<id>.png (56×56, 0/255). The manifest lists samples in split order.
namespace qmrs::io {

inline constexpr int kManifestVersion = 1;

namespace detail {

inline nlohmann::json sample_entry(const InstanceSample& s, const char* split) {
  return {{"id", s.id},
          {"split", split},
          {"image", "images/" + s.id + ".png"},
          {"mask", "masks/" + s.id + ".png"},
          {"class", std::string(class_name(s.cls))},
          {"box", {s.box.x0, s.box.y0, s.box.x1, s.box.y1}}};
}

template <class T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) raise<DataError>(where, ": missing field '", key, "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    raise<DataError>(where, ": field '", key, "' has the wrong type (", e.what(), ")");
  }
}

}  // namespace detail

inline void write_dataset(const DatasetSplit& split, const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  nlohmann::json samples = nlohmann::json::array();
  auto emit = [&](const std::vector<InstanceSample>& part, const char* name) {
    for (const auto& s : part) {
      write_image(dir / "images" / (s.id + ".png"), s.image);
      write_mask(dir / "masks" / (s.id + ".png"), s.gt_fine);
      samples.push_back(detail::sample_entry(s, name));
    }
  };
  emit(split.train, "train");
  emit(split.val, "val");
  emit(split.test, "test");
  const nlohmann::json manifest{{"format", "qmrs-dataset"},
                                {"version", kManifestVersion},
                                {"seed", seed},
                                {"counts", {{"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}}},
                                {"samples", samples}};
  std::ofstream f(dir / "manifest.json");
  f << manifest.dump(2) << "\n";
  if (!f) raise<DataError>("cannot write ", (dir / "manifest.json").string());
}

inline DatasetSplit read_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream f(path);
  if (!f) raise<DataError>("missing file: ", path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    raise<DataError>(path.string(), ": not valid JSON (", e.what(), ")");
  }
  if (manifest.value("format", "") != "qmrs-dataset") raise<DataError>(path.string(), ": not a qmrs dataset manifest");
  if (manifest.value("version", 0) != kManifestVersion)
    raise<DataError>(path.string(), ": manifest version ", manifest.value("version", 0), " is not supported");
  if (!manifest.contains("samples") || !manifest["samples"].is_array()) raise<DataError>(path.string(), ": missing samples array");

  DatasetSplit out;
  for (const auto& e : manifest["samples"]) {
    const auto id = detail::field<std::string>(e, "id", path.string());
    const auto where = path.string() + " sample '" + id + "'";
    InstanceSample s;
    s.id = id;
    s.cls = parse_class(detail::field<std::string>(e, "class", where));
    const auto box = detail::field<std::vector<double>>(e, "box", where);
    if (box.size() != 4) raise<DataError>(where, ": box needs 4 coordinates");
    s.box = Box{box[0], box[1], box[2], box[3]};
    if (!s.box.valid()) raise<DataError>(where, ": box has non-positive extent");
    s.image = read_image(dir / detail::field<std::string>(e, "image", where));
    s.gt_fine = read_mask(dir / detail::field<std::string>(e, "mask", where));
    const auto split = detail::field<std::string>(e, "split", where);
    if (split == "train") out.train.push_back(std::move(s));
    else if (split == "val") out.val.push_back(std::move(s));
    else if (split == "test") out.test.push_back(std::move(s));
    else raise<DataError>(where, ": unknown split '", split, "'");
  }
  return out;
}

}  // namespace qmrs::io
