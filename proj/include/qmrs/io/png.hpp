#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "qmrs/error.hpp"
#include "qmrs/types.hpp"

// 8-bit PNG read/write through libpng's simplified API.
namespace qmrs::io {

struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> bytes;
};

namespace detail {

inline png_uint_32 png_format(int channels) {
  if (channels == 1) return PNG_FORMAT_GRAY;
  if (channels == 3) return PNG_FORMAT_RGB;
  raise<ContractError>("png: unsupported channel count ", channels);
}

}  // namespace detail

// Decodes any PNG into gray or RGB samples (alpha is composited away by
// libpng's format conversion).
inline Raster read_png(const std::filesystem::path& path, int channels) {
  if (!std::filesystem::exists(path)) raise<DataError>("missing file: ", path.string());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) raise<DataError>("cannot read PNG ", path.string(), ": ", img.message);
  img.format = detail::png_format(channels);
  Raster r{static_cast<int>(img.width), static_cast<int>(img.height), channels, {}};
  r.bytes.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, r.bytes.data(), 0, nullptr)) {
    png_image_free(&img);
    raise<DataError>("cannot decode PNG ", path.string(), ": ", img.message);
  }
  return r;
}

inline std::vector<std::uint8_t> encode_png(const Raster& r) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(r.width);
  img.height = static_cast<png_uint_32>(r.height);
  img.format = detail::png_format(r.channels);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, r.bytes.data(), 0, nullptr)) raise<Error>("png encode: ", img.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, r.bytes.data(), 0, nullptr)) raise<Error>("png encode: ", img.message);
  out.resize(size);
  return out;
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) raise<DataError>("cannot write ", path.string());
}

inline void write_png(const std::filesystem::path& path, const Raster& r) { write_file(path, encode_png(r)); }

inline std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

inline Raster to_raster(const Image& img) {
  Raster r{img.width, img.height, 3, {}};
  r.bytes.reserve(img.rgb.size());
  for (float v : img.rgb) r.bytes.push_back(to_byte(v));
  return r;
}

inline Image to_image(const Raster& r) {
  if (r.channels != 3) raise<ContractError>("to_image: expects an RGB raster");
  Image img(r.width, r.height);
  for (std::size_t k = 0; k < r.bytes.size(); ++k) img.rgb[k] = static_cast<float>(r.bytes[k]) / 255.0f;
  return img;
}

inline Image read_image(const std::filesystem::path& path) { return to_image(read_png(path, 3)); }
inline void write_image(const std::filesystem::path& path, const Image& img) { write_png(path, to_raster(img)); }

// 56×56 mask as 0/255 gray; reading binarizes at 128.
inline void write_mask(const std::filesystem::path& path, const MaskGrid& m) {
  Raster r{m.side(), m.side(), 1, {}};
  for (float v : m.values) r.bytes.push_back(v >= 0.5f ? 255 : 0);
  write_png(path, r);
}

inline MaskGrid read_mask(const std::filesystem::path& path) {
  const auto r = read_png(path, 1);
  if (r.width != 56 || r.height != 56) raise<DataError>("mask ", path.string(), " is ", r.width, "x", r.height, ", expected 56x56");
  MaskGrid m(kFineLevel, MaskKind::kBinary);
  for (std::size_t k = 0; k < r.bytes.size(); ++k) m.values[k] = r.bytes[k] >= 128 ? 1.0f : 0.0f;
  return m;
}

}  // namespace qmrs::io
