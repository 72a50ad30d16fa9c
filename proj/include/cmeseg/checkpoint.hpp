#pragma once

// Checkpoint files:
//   "FCN8CKPT" | u32 version (1) | u32 tensor count |
//   per tensor: u16 name length, name, u8 rank, u32 extents[rank], f32 payload
// All integers and floats little-endian.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cmeseg/error.hpp"
#include "cmeseg/fcn8.hpp"

namespace cmeseg {

inline constexpr std::string_view kCheckpointMagic = "FCN8CKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  const std::vector<std::uint8_t>& data() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}
  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    const auto* p = take(2);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::uint8_t* take(std::size_t n) {
    if (remaining() < n) throw CorruptCheckpoint("truncated at byte " + std::to_string(pos_));
    const auto* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<StoredTensor>& tensors) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw CorruptCheckpoint("tensor name too long: " + t.name.substr(0, 32));
    if (t.shape.size() > 0xff) throw CorruptCheckpoint("rank too large for " + t.name);
    std::size_t count = 1;
    for (auto e : t.shape) count *= e;
    if (count != t.values.size()) throw DimsMismatch(t.name + ": shape does not match payload");
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto e : t.shape) w.u32(e);
    for (float v : t.values) w.f32(v);
  }
  return w.data();
}

inline std::vector<StoredTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (r.remaining() < kCheckpointMagic.size() || r.str(kCheckpointMagic.size()) != kCheckpointMagic)
    throw CorruptCheckpoint("bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw CorruptCheckpoint("unsupported version " + std::to_string(version));
  const std::uint32_t n = r.u32();
  std::vector<StoredTensor> out;
  for (std::uint32_t k = 0; k < n; ++k) {
    StoredTensor t;
    t.name = r.str(r.u16());
    const std::uint8_t rank = r.u8();
    std::uint64_t count = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
      t.shape.push_back(r.u32());
      count *= t.shape.back();
    }
    if (count * 4 > r.remaining()) throw CorruptCheckpoint("payload of " + t.name + " is truncated");
    t.values.resize(count);
    for (auto& v : t.values) v = r.f32();
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw CorruptCheckpoint(std::to_string(r.remaining()) + " trailing bytes");
  return out;
}

template <typename T>
std::vector<StoredTensor> to_stored(const std::vector<Param<T>>& params) {
  std::vector<StoredTensor> out;
  for (const auto& p : params) {
    StoredTensor t{p.name, p.shape, std::vector<float>(p.value.size())};
    for (std::size_t i = 0; i < p.value.size(); ++i) t.values[i] = static_cast<float>(p.value[i]);
    out.push_back(std::move(t));
  }
  return out;
}

/// Copies stored values into matching parameters. Every parameter must be
/// present with an identical shape; extra "meta." entries are ignored.
template <typename T>
void assign_stored(std::vector<Param<T>>& params, const std::vector<StoredTensor>& stored) {
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : stored) by_name[t.name] = &t;
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DimsMismatch("checkpoint lacks " + p.name);
    if (it->second->shape != p.shape) {
      auto fmt = [](const std::vector<std::uint32_t>& s) {
        std::string r;
        for (auto e : s) r += (r.empty() ? "" : "x") + std::to_string(e);
        return r;
      };
      throw DimsMismatch(p.name + ": checkpoint " + fmt(it->second->shape) + " vs graph " + fmt(p.shape));
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(it->second->values[i]);
  }
  for (const auto& t : stored)
    if (t.name.rfind("meta.", 0) != 0 &&
        std::none_of(params.begin(), params.end(), [&](const Param<T>& p) { return p.name == t.name; }))
      throw DimsMismatch("checkpoint has unknown tensor " + t.name);
}

template <typename T>
void copy_params(std::vector<Param<T>>& dst, const std::vector<Param<T>>& src) {
  if (dst.size() != src.size()) throw DimsMismatch("parameter inventories differ");
  for (std::size_t k = 0; k < dst.size(); ++k) {
    if (dst[k].name != src[k].name || dst[k].shape != src[k].shape)
      throw DimsMismatch("parameter " + dst[k].name + " vs " + src[k].name);
    dst[k].value.storage() = src[k].value.storage();
  }
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ImageIoError("cannot create " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ImageIoError("failed writing " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CorruptCheckpoint("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// Optional scalar metadata is written as rank-0 "meta.<key>" tensors.
template <typename T>
void save_checkpoint(const Fcn8<T>& net, const std::filesystem::path& path,
                     const std::map<std::string, float>& meta = {}) {
  auto tensors = to_stored(net.params());
  for (const auto& [k, v] : meta) tensors.push_back({"meta." + k, {}, {v}});
  write_bytes(path, encode_checkpoint(tensors));
}

template <typename T>
void load_checkpoint(Fcn8<T>& net, const std::filesystem::path& path) {
  assign_stored(net.params(), decode_checkpoint(read_bytes(path)));
}

}  // namespace cmeseg
