#pragma once

// Binary container shared by weight files and checkpoints.
//
//   bytes 0..7    magic "NUTRIPRD"
//   u32           container version (1)
//   u64           header length H
//   H bytes       UTF-8 JSON header:
//                   {"kind": "...", "meta": {...},
//                    "arrays": [{"name", "dtype": "f32"|"f64", "shape", "offset", "nbytes"}, ...]}
//   u64           payload length P
//   P bytes       array data, little-endian, offsets relative to payload start
//   u32           CRC-32 over header bytes followed by payload bytes
//
// Files are written to a temporary sibling and renamed into place.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "nutripred/error.hpp"
#include "nutripred/tensor.hpp"

namespace nutripred {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr char kContainerMagic[8] = {'N', 'U', 'T', 'R', 'I', 'P', 'R', 'D'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType { f32, f64 };

inline std::string_view dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

template <std::floating_point T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "only float and double are storable");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// One named array as stored on disk.
struct StoredArray {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  std::vector<unsigned char> bytes;

  template <std::floating_point T>
  static StoredArray from_tensor(std::string name, const Tensor<T>& t) {
    StoredArray a{std::move(name), t.shape(), dtype_of<T>(), {}};
    a.bytes.resize(t.size() * sizeof(T));
    if (!a.bytes.empty()) std::memcpy(a.bytes.data(), t.data(), a.bytes.size());
    return a;
  }

  std::size_t count() const { return shape_size(shape); }

  /// Converts to the requested precision (f32 -> f64 is exact).
  template <std::floating_point T>
  Tensor<T> to_tensor() const {
    Tensor<T> t(shape);
    if (dtype == DType::f32) {
      std::vector<float> tmp(count());
      if (!tmp.empty()) std::memcpy(tmp.data(), bytes.data(), tmp.size() * sizeof(float));
      for (std::size_t i = 0; i < tmp.size(); ++i) t[i] = static_cast<T>(tmp[i]);
    } else {
      std::vector<double> tmp(count());
      if (!tmp.empty()) std::memcpy(tmp.data(), bytes.data(), tmp.size() * sizeof(double));
      for (std::size_t i = 0; i < tmp.size(); ++i) t[i] = static_cast<T>(tmp[i]);
    }
    return t;
  }
};

inline const StoredArray* find_array(std::span<const StoredArray> arrays, std::string_view name) {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

struct Container {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<StoredArray> arrays;

  const StoredArray* find(std::string_view name) const { return find_array(arrays, name); }
};

namespace detail {

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(const std::vector<char>& in, std::size_t& pos, ErrorKind on_corrupt, const std::string& path) {
  if (pos + sizeof(U) > in.size()) raise(on_corrupt, path + ": truncated container");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

inline std::uint32_t crc(std::uint32_t seed, const void* data, std::size_t n) {
  const auto* p = static_cast<const Bytef*>(data);
  uLong c = seed;
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace detail

/// Writes atomically: temp file in the same directory, then rename.
inline void write_container(const std::filesystem::path& path, const Container& c) {
  nlohmann::json header{{"kind", c.kind}, {"meta", c.meta}, {"arrays", nlohmann::json::array()}};
  std::uint64_t offset = 0;
  for (const auto& a : c.arrays) {
    if (a.bytes.size() != a.count() * dtype_size(a.dtype)) {
      throw ArgumentError("array " + a.name + " has inconsistent byte size");
    }
    header["arrays"].push_back(
        {{"name", a.name}, {"dtype", dtype_name(a.dtype)}, {"shape", a.shape}, {"offset", offset}, {"nbytes", a.bytes.size()}});
    offset += a.bytes.size();
  }
  const std::string header_text = header.dump();

  std::string prefix(kContainerMagic, sizeof(kContainerMagic));
  detail::put(prefix, kContainerVersion);
  detail::put(prefix, static_cast<std::uint64_t>(header_text.size()));

  std::uint32_t checksum = detail::crc(0, header_text.data(), header_text.size());
  for (const auto& a : c.arrays) checksum = detail::crc(checksum, a.bytes.data(), a.bytes.size());

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot open " + tmp.string() + " for writing");
    out.write(prefix.data(), static_cast<std::streamsize>(prefix.size()));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    std::string len;
    detail::put(len, offset);
    out.write(len.data(), static_cast<std::streamsize>(len.size()));
    for (const auto& a : c.arrays) {
      out.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
    }
    std::string tail;
    detail::put(tail, checksum);
    out.write(tail.data(), static_cast<std::streamsize>(tail.size()));
    out.flush();
    if (!out) throw FileError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw FileError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

/// Reads and fully validates a container. A missing file raises FileError; any structural
/// problem (truncation, bad magic, checksum, kind mismatch) raises `on_corrupt`.
inline Container read_container(const std::filesystem::path& path, std::string_view expected_kind,
                                ErrorKind on_corrupt) {
  const std::string where = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open " + where);
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  if (buf.size() < sizeof(kContainerMagic) || std::memcmp(buf.data(), kContainerMagic, sizeof(kContainerMagic)) != 0) {
    raise(on_corrupt, where + ": not a nutripred container");
  }
  pos = sizeof(kContainerMagic);
  const auto version = detail::get<std::uint32_t>(buf, pos, on_corrupt, where);
  if (version != kContainerVersion) {
    raise(on_corrupt, where + ": unsupported container version " + std::to_string(version));
  }
  const auto header_len = detail::get<std::uint64_t>(buf, pos, on_corrupt, where);
  if (header_len > buf.size() - pos) raise(on_corrupt, where + ": truncated header");
  const std::size_t header_pos = pos;
  pos += header_len;
  const auto payload_len = detail::get<std::uint64_t>(buf, pos, on_corrupt, where);
  if (payload_len > buf.size() - pos || buf.size() - pos - payload_len != sizeof(std::uint32_t)) {
    raise(on_corrupt, where + ": truncated or oversized payload");
  }
  const std::size_t payload_pos = pos;
  pos += payload_len;
  const auto stored_crc = detail::get<std::uint32_t>(buf, pos, on_corrupt, where);
  std::uint32_t actual = detail::crc(0, buf.data() + header_pos, header_len);
  actual = detail::crc(actual, buf.data() + payload_pos, payload_len);
  if (actual != stored_crc) raise(on_corrupt, where + ": checksum mismatch");

  Container c;
  try {
    const auto header = nlohmann::json::parse(buf.begin() + static_cast<std::ptrdiff_t>(header_pos),
                                              buf.begin() + static_cast<std::ptrdiff_t>(header_pos + header_len));
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.at("meta");
    for (const auto& entry : header.at("arrays")) {
      StoredArray a;
      a.name = entry.at("name").get<std::string>();
      a.shape = entry.at("shape").get<Shape>();
      const auto dtype = entry.at("dtype").get<std::string>();
      if (dtype == "f32") {
        a.dtype = DType::f32;
      } else if (dtype == "f64") {
        a.dtype = DType::f64;
      } else {
        raise(on_corrupt, where + ": unknown dtype " + dtype);
      }
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (nbytes != a.count() * dtype_size(a.dtype) || offset > payload_len || nbytes > payload_len - offset) {
        raise(on_corrupt, where + ": array " + a.name + " has an inconsistent extent");
      }
      const auto* start = reinterpret_cast<const unsigned char*>(buf.data() + payload_pos + offset);
      a.bytes.assign(start, start + nbytes);
      c.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    raise(on_corrupt, where + ": malformed header: " + e.what());
  }
  if (c.kind != expected_kind) {
    raise(on_corrupt, where + ": expected a " + std::string(expected_kind) + " file, found " + c.kind);
  }
  return c;
}

}  // namespace nutripred
