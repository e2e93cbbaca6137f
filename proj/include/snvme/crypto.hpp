#pragma once

// Key derivation, sector sealing, freshness and network MACs, tree hashing.
//
// Every primitive here is pure: the same inputs always produce the same
// outputs, and callers may use them concurrently.

#include <cstdint>
#include <initializer_list>
#include <span>

#include "snvme/bytes.hpp"

namespace snvme {

using Key = ByteArray<32>;
using Node = ByteArray<16>;
using AeadTag = ByteArray<16>;
using NetMac = ByteArray<8>;
using Nonce = ByteArray<12>;

inline constexpr std::uint64_t kNonceSectorLimit = std::uint64_t{1} << 38;
inline constexpr std::size_t kNodeBytes = 16;

enum class AeadId : std::uint8_t { kAes256Gcm = 1, kChaCha20Poly1305 = 2 };
enum class HashId : std::uint8_t { kBlake3 = 1, kSha256 = 2 };

/// Algorithm selection. MACs are always HMAC over the selected hash.
struct CipherSuite {
  AeadId aead = AeadId::kAes256Gcm;
  HashId hash = HashId::kBlake3;

  friend bool operator==(const CipherSuite&, const CipherSuite&) = default;
};

inline constexpr CipherSuite kDefaultSuite{};

/// 32-byte digest of `data` under the suite hash.
ByteArray<32> digest(ByteSpan data, const CipherSuite& suite = kDefaultSuite);

/// HMAC over the suite hash; message is the concatenation of `parts`.
ByteArray<32> hmac(ByteSpan key, std::initializer_list<ByteSpan> parts,
                   const CipherSuite& suite = kDefaultSuite);

/// k_d = HMAC(k_s, device_id). Throws on an empty device id.
Key derive_device_key(const Key& tenant_key, ByteSpan device_id,
                      const CipherSuite& suite = kDefaultSuite);

/// k = HMAC(k_d, key_id as 4 little-endian bytes).
Key derive_data_key(const Key& device_key, std::uint32_t key_id,
                    const CipherSuite& suite = kDefaultSuite);

/// 96-bit nonce: sector in the top 38 bits, counter in the low 58 bits,
/// serialized big-endian.
Nonce compose_nonce(std::uint64_t sector, std::uint64_t counter);

/// Encrypts one sector. `ciphertext` must be the size of `plaintext`.
AeadTag seal_sector(const Key& key, std::uint64_t sector,
                    std::uint64_t counter, ByteSpan plaintext,
                    MutableByteSpan ciphertext,
                    const CipherSuite& suite = kDefaultSuite);

/// Decrypts and authenticates one sector, throwing SectorError(kIntegrity)
/// on failure. `tag` may be shorter than 16 bytes (truncated legacy tags).
void open_sector(const Key& key, std::uint64_t sector, std::uint64_t counter,
                 ByteSpan ciphertext, ByteSpan tag, MutableByteSpan plaintext,
                 const CipherSuite& suite = kDefaultSuite);

/// H_n = HMAC(k_net, iv || j) truncated to 8 bytes.
NetMac network_mac(const Key& net_key, std::uint64_t iv_counter,
                   std::uint64_t j, const CipherSuite& suite = kDefaultSuite);

/// 16-byte freshness tag. Bytes 0..7: HMAC(k_f, sector || iv || parent)
/// truncated. Bytes 8..15: HMAC(k_f, "snvme-tag" || sector || iv || bytes
/// 0..7) truncated, which lets a reader tell a stale tag (written under an
/// older parent) from a corrupted one without knowing the old parent.
Node freshness_tag(const Key& freshness_key, std::uint64_t sector,
                   std::uint64_t iv_counter, const Node& parent,
                   const CipherSuite& suite = kDefaultSuite);

/// True when `tag` was produced by freshness_tag for (sector, iv) under
/// some parent.
bool freshness_tag_authentic(const Key& freshness_key, std::uint64_t sector,
                             std::uint64_t iv_counter, const Node& tag,
                             const CipherSuite& suite = kDefaultSuite);

/// Level-1 node: hash of `ivs` as 8-byte entries zero-padded to `width`.
Node node_hash(std::span<const std::uint64_t> ivs, std::uint32_t width,
               const CipherSuite& suite = kDefaultSuite);

/// Inner node: hash of the children zero-padded to `width` entries.
Node tree_node_hash(std::span<const Node> children, std::uint32_t width,
                    const CipherSuite& suite = kDefaultSuite);

bool constant_time_equal(ByteSpan a, ByteSpan b);

enum class IvMode { kRandom, kSequential };

struct WriteCapacity {
  double bytes = 0;
  bool saturated = false;
};

/// Bytes writable under one key. Random IVs use the birthday bound
/// n ~ sqrt(-2 * 2^d * ln(1 - p)); sequential IVs allow 2^d blocks. Results
/// beyond double range saturate at DBL_MAX with `saturated` set.
WriteCapacity safe_write_capacity(double block_bytes, unsigned iv_bits,
                                  IvMode mode, double p);

}  // namespace snvme
