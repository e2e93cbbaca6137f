#pragma once

// Portable BLAKE3 (unkeyed and keyed modes, extendable output).

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "snvme/bytes.hpp"

namespace snvme {

class Blake3 {
 public:
  static constexpr std::size_t kBlockLen = 64;
  static constexpr std::size_t kChunkLen = 1024;
  static constexpr std::size_t kOutLen = 32;
  static constexpr std::size_t kKeyLen = 32;

  Blake3();
  explicit Blake3(const ByteArray<kKeyLen>& key);

  Blake3& update(ByteSpan input);
  void finalize(MutableByteSpan out) const;
  ByteArray<kOutLen> finalize() const {
    ByteArray<kOutLen> out{};
    finalize(out);
    return out;
  }

  static ByteArray<kOutLen> hash(ByteSpan input) {
    return Blake3().update(input).finalize();
  }

 private:
  using Words = std::array<std::uint32_t, 8>;

  struct Output {
    Words input_cv;
    std::array<std::uint32_t, 16> block_words;
    std::uint64_t counter;
    std::uint32_t block_len;
    std::uint32_t flags;

    Words chaining_value() const;
    void root_bytes(MutableByteSpan out) const;
  };

  struct ChunkState {
    Words cv;
    std::uint64_t chunk_counter = 0;
    std::array<std::uint8_t, kBlockLen> block{};
    std::uint8_t block_len = 0;
    std::uint8_t blocks_compressed = 0;
    std::uint32_t flags = 0;

    ChunkState(const Words& key, std::uint64_t counter, std::uint32_t f);
    std::size_t len() const {
      return kBlockLen * blocks_compressed + block_len;
    }
    std::uint32_t start_flag() const;
    void update(ByteSpan input);
    Output output() const;
  };

  Blake3(const Words& key, std::uint32_t flags);
  void push_chunk_cv(Words cv, std::uint64_t total_chunks);
  static Output parent_output(const Words& left, const Words& right,
                              const Words& key, std::uint32_t flags);

  Words key_;
  ChunkState chunk_;
  std::vector<Words> cv_stack_;
  std::uint32_t flags_;
};

}  // namespace snvme
