#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

#include <zlib.h>

#include "bseg/error.hpp"
#include "bseg/grid.hpp"
#include "bseg/network.hpp"
#include "bseg/pgm.hpp"

namespace bseg {

// Checkpoint layout, all integers and floats little-endian:
//   "BSEG"                                  4 bytes
//   version                                 u16
//   --- payload (covered by the checksum) ---
//   in_channels, base_channels, depth, latent_dim   u32 each
//   skip_connections, bayesian_weights      u8 each
//   tensor count                            u32
//   per tensor:
//     name length u16, name bytes
//     rank u8, extents u32 * rank
//     mean values f64 * size, log-variance values f64 * size
//   --- end of payload ---
//   CRC-32 (zlib polynomial) of the payload u32

inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'B', 'S', 'E', 'G'};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    bytes.insert(bytes.end(), raw, raw + sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  std::vector<unsigned char> bytes;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

  template <class T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, data_ + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == size_; }

 private:
  void need(std::size_t n) const {
    if (size_ - pos_ < n) fail(ErrorCode::TruncatedFile, "checkpoint payload ends early");
  }
  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const SegNet& net) {
  detail::ByteWriter w;
  const NetConfig& c = net.config();
  w.put(static_cast<std::uint32_t>(c.in_channels));
  w.put(static_cast<std::uint32_t>(c.base_channels));
  w.put(static_cast<std::uint32_t>(c.depth));
  w.put(static_cast<std::uint32_t>(c.latent_dim));
  w.put(static_cast<std::uint8_t>(c.skip_connections));
  w.put(static_cast<std::uint8_t>(c.bayesian_weights));
  w.put(static_cast<std::uint32_t>(net.parameters().size()));
  for (const auto& p : net.parameters()) {
    w.put(static_cast<std::uint16_t>(p.name.size()));
    w.put_bytes(p.name.data(), p.name.size());
    const Shape& s = p.posterior.shape();
    w.put(static_cast<std::uint8_t>(s.size()));
    for (auto e : s) w.put(static_cast<std::uint32_t>(e));
    for (double v : p.posterior.mean.raw()) w.put(v);
    for (double v : p.posterior.log_var.raw()) w.put(v);
  }
  detail::ByteWriter file;
  file.put_bytes(kCheckpointMagic, 4);
  file.put(kCheckpointVersion);
  file.put_bytes(w.bytes.data(), w.bytes.size());
  file.put(detail::crc32_of(w.bytes.data(), w.bytes.size()));
  return file.bytes;
}

/// Rebuilds a network from checkpoint bytes, validating magic, version and checksum.
inline SegNet decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    fail(ErrorCode::BadMagic, "not a checkpoint file");
  if (bytes.size() < 10) fail(ErrorCode::TruncatedFile, "checkpoint too short");
  detail::ByteReader head(bytes.data() + 4, 2);
  const auto version = head.get<std::uint16_t>();
  if (version != kCheckpointVersion)
    fail(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                         std::to_string(kCheckpointVersion));
  const unsigned char* payload = bytes.data() + 6;
  const std::size_t payload_size = bytes.size() - 10;
  detail::ByteReader tail(bytes.data() + bytes.size() - 4, 4);
  if (tail.get<std::uint32_t>() != detail::crc32_of(payload, payload_size))
    fail(ErrorCode::ChecksumMismatch, "checkpoint checksum does not match payload");

  detail::ByteReader r(payload, payload_size);
  NetConfig c;
  c.in_channels = r.get<std::uint32_t>();
  c.base_channels = r.get<std::uint32_t>();
  c.depth = r.get<std::uint32_t>();
  c.latent_dim = r.get<std::uint32_t>();
  c.skip_connections = r.get<std::uint8_t>() != 0;
  c.bayesian_weights = r.get<std::uint8_t>() != 0;
  SegNet net(c);
  const auto count = r.get<std::uint32_t>();
  if (count != net.parameters().size())
    fail(ErrorCode::ConfigShapeMismatch, "checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                                             std::to_string(net.parameters().size()));
  for (auto& p : net.parameters()) {
    const std::string name = r.get_string(r.get<std::uint16_t>());
    if (name != p.name) fail(ErrorCode::ConfigShapeMismatch, "tensor " + name + " where " + p.name + " expected");
    Shape s(r.get<std::uint8_t>());
    for (auto& e : s) e = r.get<std::uint32_t>();
    if (s != p.posterior.shape())
      fail(ErrorCode::ConfigShapeMismatch, "tensor " + name + " has shape " + shape_str(s) + ", expected " +
                                               shape_str(p.posterior.shape()));
    for (auto& v : p.posterior.mean.raw()) v = r.get<double>();
    for (auto& v : p.posterior.log_var.raw()) v = r.get<double>();
  }
  if (!r.done()) fail(ErrorCode::ChecksumMismatch, "trailing bytes after the last tensor");
  return net;
}

inline void save_checkpoint(const SegNet& net, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(net));
}

inline SegNet load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

/// Loads into an existing network; the stored configuration must match it.
inline void load_checkpoint_into(SegNet& net, const std::filesystem::path& path) {
  SegNet loaded = load_checkpoint(path);
  if (!(loaded.config() == net.config()))
    fail(ErrorCode::ConfigShapeMismatch, "checkpoint network configuration differs from the target network");
  net = std::move(loaded);
}

}  // namespace bseg
