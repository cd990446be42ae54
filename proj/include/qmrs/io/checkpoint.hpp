#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "qmrs/error.hpp"
#include "qmrs/io/config.hpp"
#include "qmrs/model.hpp"

// Binary checkpoint, all integers and reals little-endian:
//
//   "QMRS"  u32 version  u64 payload_length
//   payload:
//     u32 n  config text (n bytes, canonical key = value form)
//     i32 epoch  f64 best_val_iou
//     u32 tensors, then per tensor:
//       u32 n  name (n bytes)  u32 rank  u64 dims[rank]  f32 values[prod(dims)]
//
// The payload length is checked against the file size before parsing.
namespace qmrs::io {

inline constexpr char kCheckpointMagic[4] = {'Q', 'M', 'R', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeader = 16;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

struct Checkpoint {
  Config config;
  model::ModelParams<float> params;
  int epoch = 0;
  double best_val_iou = 0;
};

namespace detail {

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, p_, sizeof(T));
    p_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_), n);
    p_ += n;
    return s;
  }
  void get_floats(std::vector<float>& out, std::size_t n) {
    if (n > static_cast<std::size_t>(end_ - p_) / sizeof(float)) raise<FormatError>("checkpoint: tensor data runs past the payload");
    out.resize(n);
    std::memcpy(out.data(), p_, n * sizeof(float));
    p_ += n * sizeof(float);
  }
  bool done() const { return p_ == end_; }

 private:
  void need(std::size_t n) const {
    if (n > static_cast<std::size_t>(end_ - p_)) raise<FormatError>("checkpoint: field runs past the payload");
  }
  const std::uint8_t* p_;
  const std::uint8_t* end_;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  detail::Writer body;
  body.put_string(to_text(ck.config));
  body.put(static_cast<std::int32_t>(ck.epoch));
  body.put(ck.best_val_iou);
  body.put(static_cast<std::uint32_t>(ck.params.store.size()));
  for (const auto& [name, t] : ck.params.store) {
    body.put_string(name);
    body.put(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) body.put(static_cast<std::uint64_t>(d));
    for (float v : t.data()) body.put(v);
  }
  detail::Writer out;
  out.bytes.assign(kCheckpointMagic, kCheckpointMagic + 4);
  out.put(kCheckpointVersion);
  out.put(static_cast<std::uint64_t>(body.bytes.size()));
  out.bytes.insert(out.bytes.end(), body.bytes.begin(), body.bytes.end());
  return out.bytes;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    const std::string got(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(4, bytes.size())));
    raise<FormatError>("not a checkpoint: expected magic \"QMRS\", found \"", got, "\"");
  }
  if (bytes.size() < kCheckpointHeader) raise<TruncationError>("checkpoint truncated inside the header (", bytes.size(), " bytes)");
  detail::Reader head(bytes.data() + 4, kCheckpointHeader - 4);
  const auto version = head.get<std::uint32_t>();
  if (version != kCheckpointVersion) raise<VersionError>("checkpoint version ", version, " is not supported (expected ", kCheckpointVersion, ")");
  const auto length = head.get<std::uint64_t>();
  if (bytes.size() - kCheckpointHeader != length) {
    if (bytes.size() - kCheckpointHeader < length)
      raise<TruncationError>("checkpoint truncated: payload declares ", length, " bytes, file holds ", bytes.size() - kCheckpointHeader);
    raise<FormatError>("checkpoint has ", bytes.size() - kCheckpointHeader - length, " trailing bytes");
  }

  detail::Reader r(bytes.data() + kCheckpointHeader, length);
  Checkpoint ck;
  try {
    ck.config = parse_config(r.get_string());
    ck.config.validate();
  } catch (const ConfigError& e) {
    raise<FormatError>("checkpoint config snapshot is invalid: ", e.what());
  }
  ck.epoch = r.get<std::int32_t>();
  ck.best_val_iou = r.get<double>();
  // the layout comes from the config; values come from the table
  ck.params = model::init_params<float>(ck.config.model, 0);
  const auto count = r.get<std::uint32_t>();
  if (count != ck.params.store.size())
    raise<FormatError>("checkpoint holds ", count, " tensors, the configured model has ", ck.params.store.size());
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name = r.get_string();
    if (!ck.params.store.contains(name)) raise<FormatError>("checkpoint tensor '", name, "' is not a model parameter");
    auto& t = ck.params.store[name];
    const auto rank = r.get<std::uint32_t>();
    nc::Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    if (shape != t.shape()) raise<FormatError>("checkpoint tensor '", name, "' has shape ", nc::shape_str(shape), ", expected ", nc::shape_str(t.shape()));
    r.get_floats(t.values(), t.size());
  }
  if (!r.done()) raise<FormatError>("checkpoint payload has unread bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ck);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) raise<DataError>("cannot write checkpoint ", tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise<DataError>("cannot open checkpoint ", path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace qmrs::io
