#include "snvme/blake3.hpp"

#include <algorithm>
#include <cstring>

namespace snvme {
namespace {

constexpr std::uint32_t kChunkStart = 1u << 0;
constexpr std::uint32_t kChunkEnd = 1u << 1;
constexpr std::uint32_t kParent = 1u << 2;
constexpr std::uint32_t kRoot = 1u << 3;
constexpr std::uint32_t kKeyedHash = 1u << 4;

constexpr std::array<std::uint32_t, 8> kIv = {
    0x6A09E667, 0xBB67AE85, 0x3C6EF372, 0xA54FF53A,
    0x510E527F, 0x9B05688C, 0x1F83D9AB, 0x5BE0CD19};

// Message word order for each of the seven rounds.
constexpr std::uint8_t kSchedule[7][16] = {
    {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15},
    {2, 6, 3, 10, 7, 0, 4, 13, 1, 11, 12, 5, 9, 14, 15, 8},
    {3, 4, 10, 12, 13, 2, 7, 14, 6, 5, 9, 0, 11, 15, 8, 1},
    {10, 7, 12, 9, 14, 3, 13, 15, 4, 0, 11, 2, 5, 8, 1, 6},
    {12, 13, 9, 11, 15, 10, 14, 8, 7, 2, 5, 3, 0, 1, 6, 4},
    {9, 14, 11, 5, 8, 12, 15, 1, 13, 3, 0, 10, 2, 6, 4, 7},
    {11, 15, 5, 0, 1, 9, 8, 6, 14, 10, 2, 12, 3, 4, 7, 13},
};

inline std::uint32_t rotr(std::uint32_t x, int n) {
  return (x >> n) | (x << (32 - n));
}

#define SNVME_G(a, b, c, d, mx, my) \
  a = a + b + (mx);                 \
  d = rotr(d ^ a, 16);              \
  c = c + d;                        \
  b = rotr(b ^ c, 12);              \
  a = a + b + (my);                 \
  d = rotr(d ^ a, 8);               \
  c = c + d;                        \
  b = rotr(b ^ c, 7)

std::array<std::uint32_t, 16> compress(
    const std::array<std::uint32_t, 8>& cv,
    const std::array<std::uint32_t, 16>& m, std::uint64_t counter,
    std::uint32_t block_len, std::uint32_t flags) {
  std::uint32_t s0 = cv[0], s1 = cv[1], s2 = cv[2], s3 = cv[3];
  std::uint32_t s4 = cv[4], s5 = cv[5], s6 = cv[6], s7 = cv[7];
  std::uint32_t s8 = kIv[0], s9 = kIv[1], s10 = kIv[2], s11 = kIv[3];
  std::uint32_t s12 = static_cast<std::uint32_t>(counter);
  std::uint32_t s13 = static_cast<std::uint32_t>(counter >> 32);
  std::uint32_t s14 = block_len, s15 = flags;
  for (const auto& r : kSchedule) {
    SNVME_G(s0, s4, s8, s12, m[r[0]], m[r[1]]);
    SNVME_G(s1, s5, s9, s13, m[r[2]], m[r[3]]);
    SNVME_G(s2, s6, s10, s14, m[r[4]], m[r[5]]);
    SNVME_G(s3, s7, s11, s15, m[r[6]], m[r[7]]);
    SNVME_G(s0, s5, s10, s15, m[r[8]], m[r[9]]);
    SNVME_G(s1, s6, s11, s12, m[r[10]], m[r[11]]);
    SNVME_G(s2, s7, s8, s13, m[r[12]], m[r[13]]);
    SNVME_G(s3, s4, s9, s14, m[r[14]], m[r[15]]);
  }
  return {s0 ^ s8,  s1 ^ s9,  s2 ^ s10, s3 ^ s11, s4 ^ s12, s5 ^ s13,
          s6 ^ s14, s7 ^ s15, s8 ^ cv[0], s9 ^ cv[1], s10 ^ cv[2],
          s11 ^ cv[3], s12 ^ cv[4], s13 ^ cv[5], s14 ^ cv[6], s15 ^ cv[7]};
}

#undef SNVME_G

std::array<std::uint32_t, 16> words_from_block(const std::uint8_t* p) {
  std::array<std::uint32_t, 16> w;
  for (std::size_t i = 0; i < 16; ++i) {
    w[i] = static_cast<std::uint32_t>(p[4 * i]) |
           static_cast<std::uint32_t>(p[4 * i + 1]) << 8 |
           static_cast<std::uint32_t>(p[4 * i + 2]) << 16 |
           static_cast<std::uint32_t>(p[4 * i + 3]) << 24;
  }
  return w;
}

}  // namespace

Blake3::Words Blake3::Output::chaining_value() const {
  auto s = compress(input_cv, block_words, counter, block_len, flags);
  Words out;
  std::copy_n(s.begin(), 8, out.begin());
  return out;
}

void Blake3::Output::root_bytes(MutableByteSpan out) const {
  std::uint64_t block_counter = 0;
  std::size_t pos = 0;
  while (pos < out.size()) {
    auto s = compress(input_cv, block_words, block_counter, block_len,
                      flags | kRoot);
    for (std::size_t i = 0; i < 16 && pos < out.size(); ++i) {
      for (int b = 0; b < 4 && pos < out.size(); ++b) {
        out[pos++] = static_cast<std::uint8_t>(s[i] >> (8 * b));
      }
    }
    ++block_counter;
  }
}

Blake3::ChunkState::ChunkState(const Words& key, std::uint64_t counter,
                               std::uint32_t f)
    : cv(key), chunk_counter(counter), flags(f) {}

std::uint32_t Blake3::ChunkState::start_flag() const {
  return blocks_compressed == 0 ? kChunkStart : 0;
}

void Blake3::ChunkState::update(ByteSpan input) {
  while (!input.empty()) {
    if (block_len == kBlockLen) {
      auto s = compress(cv, words_from_block(block.data()), chunk_counter,
                        kBlockLen, flags | start_flag());
      std::copy_n(s.begin(), 8, cv.begin());
      ++blocks_compressed;
      block.fill(0);
      block_len = 0;
    }
    std::size_t take = std::min(kBlockLen - block_len, input.size());
    std::memcpy(block.data() + block_len, input.data(), take);
    block_len = static_cast<std::uint8_t>(block_len + take);
    input = input.subspan(take);
  }
}

Blake3::Output Blake3::ChunkState::output() const {
  return Output{cv, words_from_block(block.data()), chunk_counter, block_len,
                flags | start_flag() | kChunkEnd};
}

Blake3::Blake3() : Blake3(kIv, 0) {}

Blake3::Blake3(const ByteArray<kKeyLen>& key)
    : Blake3(
          [&] {
            Words w;
            for (std::size_t i = 0; i < 8; ++i) {
              w[i] = static_cast<std::uint32_t>(load_le(
                  ByteSpan(key).subspan(4 * i, 4), 4));
            }
            return w;
          }(),
          kKeyedHash) {}

Blake3::Blake3(const Words& key, std::uint32_t flags)
    : key_(key), chunk_(key, 0, flags), flags_(flags) {}

Blake3::Output Blake3::parent_output(const Words& left, const Words& right,
                                     const Words& key, std::uint32_t flags) {
  std::array<std::uint32_t, 16> block;
  std::copy(left.begin(), left.end(), block.begin());
  std::copy(right.begin(), right.end(), block.begin() + 8);
  return Output{key, block, 0, kBlockLen, flags | kParent};
}

void Blake3::push_chunk_cv(Words cv, std::uint64_t total_chunks) {
  while ((total_chunks & 1) == 0) {
    cv = parent_output(cv_stack_.back(), cv, key_, flags_).chaining_value();
    cv_stack_.pop_back();
    total_chunks >>= 1;
  }
  cv_stack_.push_back(cv);
}

Blake3& Blake3::update(ByteSpan input) {
  while (!input.empty()) {
    if (chunk_.len() == kChunkLen) {
      auto cv = chunk_.output().chaining_value();
      auto total = chunk_.chunk_counter + 1;
      push_chunk_cv(cv, total);
      chunk_ = ChunkState(key_, total, flags_);
    }
    std::size_t take = std::min(kChunkLen - chunk_.len(), input.size());
    chunk_.update(input.subspan(0, take));
    input = input.subspan(take);
  }
  return *this;
}

void Blake3::finalize(MutableByteSpan out) const {
  auto output = chunk_.output();
  for (auto it = cv_stack_.rbegin(); it != cv_stack_.rend(); ++it) {
    output = parent_output(*it, output.chaining_value(), key_, flags_);
  }
  output.root_bytes(out);
}

}  // namespace snvme
