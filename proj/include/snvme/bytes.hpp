#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace snvme {

using Bytes = std::vector<std::uint8_t>;
using ByteSpan = std::span<const std::uint8_t>;
using MutableByteSpan = std::span<std::uint8_t>;

template <std::size_t N>
using ByteArray = std::array<std::uint8_t, N>;

inline void store_le(MutableByteSpan out, std::uint64_t v, std::size_t width) {
  for (std::size_t i = 0; i < width; ++i) {
    out[i] = static_cast<std::uint8_t>(v >> (8 * i));
  }
}

inline std::uint64_t load_le(ByteSpan in, std::size_t width) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width; ++i) {
    v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  }
  return v;
}

inline bool all_zero(ByteSpan in) {
  for (auto b : in) {
    if (b != 0) return false;
  }
  return true;
}

inline ByteSpan as_bytes(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

std::string to_hex(ByteSpan in);
Bytes from_hex(std::string_view hex);

/// Append-only little-endian writer used by the wire and file encoders.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u48(std::uint64_t v) { put(v, 6); }
  void u64(std::uint64_t v) { put(v, 8); }
  void bytes(ByteSpan b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void str(std::string_view s) {
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(as_bytes(s));
  }

  Bytes& buffer() { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  void put(std::uint64_t v, std::size_t width) {
    for (std::size_t i = 0; i < width; ++i) {
      buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  Bytes buf_;
};

/// Bounds-checked little-endian reader; throws Error(kProtocol) on underrun.
class ByteReader {
 public:
  explicit ByteReader(ByteSpan in) : in_(in) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u48() { return get(6); }
  std::uint64_t u64() { return get(8); }
  ByteSpan bytes(std::size_t n);
  std::string str();

  std::size_t remaining() const { return in_.size() - pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::uint64_t get(std::size_t width);
  ByteSpan in_;
  std::size_t pos_ = 0;
};

}  // namespace snvme
