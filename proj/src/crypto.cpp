#include "snvme/crypto.hpp"

#include <openssl/evp.h>

#include <cfloat>
#include <cmath>
#include <memory>

#include "snvme/blake3.hpp"
#include "snvme/error.hpp"
#include "snvme/layout.hpp"

namespace snvme {
namespace {

constexpr std::size_t kHmacBlock = 64;

class HashCtx {
 public:
  explicit HashCtx(HashId id) : id_(id) {
    if (id_ == HashId::kSha256) {
      md_.reset(EVP_MD_CTX_new());
      EVP_DigestInit_ex(md_.get(), EVP_sha256(), nullptr);
    }
  }

  void update(ByteSpan data) {
    if (id_ == HashId::kBlake3) {
      b3_.update(data);
    } else {
      EVP_DigestUpdate(md_.get(), data.data(), data.size());
    }
  }

  ByteArray<32> finalize() {
    if (id_ == HashId::kBlake3) return b3_.finalize();
    ByteArray<32> out{};
    unsigned len = 0;
    EVP_DigestFinal_ex(md_.get(), out.data(), &len);
    return out;
  }

 private:
  struct MdFree {
    void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
  };
  HashId id_;
  Blake3 b3_;
  std::unique_ptr<EVP_MD_CTX, MdFree> md_;
};

struct CipherFree {
  void operator()(EVP_CIPHER_CTX* c) const { EVP_CIPHER_CTX_free(c); }
};
using CipherCtx = std::unique_ptr<EVP_CIPHER_CTX, CipherFree>;

const EVP_CIPHER* cipher_for(AeadId id) {
  switch (id) {
    case AeadId::kAes256Gcm: return EVP_aes_256_gcm();
    case AeadId::kChaCha20Poly1305: return EVP_chacha20_poly1305();
  }
  throw Error(ErrorKind::kInvalidArgument, "unknown AEAD id");
}

int tag_ctrl_get(AeadId id) {
  return id == AeadId::kAes256Gcm ? EVP_CTRL_GCM_GET_TAG : EVP_CTRL_AEAD_GET_TAG;
}
int tag_ctrl_set(AeadId id) {
  return id == AeadId::kAes256Gcm ? EVP_CTRL_GCM_SET_TAG : EVP_CTRL_AEAD_SET_TAG;
}

void check_nonce_range(std::uint64_t sector, std::uint64_t counter) {
  if (sector >= kNonceSectorLimit) {
    throw Error(ErrorKind::kInvalidArgument, "sector exceeds 38 nonce bits");
  }
  if (counter >= kIvCounterLimit) {
    throw Error(ErrorKind::kInvalidArgument, "counter exceeds 58 nonce bits");
  }
}

}  // namespace

ByteArray<32> digest(ByteSpan data, const CipherSuite& suite) {
  HashCtx h(suite.hash);
  h.update(data);
  return h.finalize();
}

ByteArray<32> hmac(ByteSpan key, std::initializer_list<ByteSpan> parts,
                   const CipherSuite& suite) {
  ByteArray<kHmacBlock> k0{};
  if (key.size() > kHmacBlock) {
    auto d = digest(key, suite);
    std::copy(d.begin(), d.end(), k0.begin());
  } else {
    std::copy(key.begin(), key.end(), k0.begin());
  }
  ByteArray<kHmacBlock> pad;
  for (std::size_t i = 0; i < kHmacBlock; ++i) pad[i] = k0[i] ^ 0x36;
  HashCtx inner(suite.hash);
  inner.update(pad);
  for (auto p : parts) inner.update(p);
  auto inner_digest = inner.finalize();

  for (std::size_t i = 0; i < kHmacBlock; ++i) pad[i] = k0[i] ^ 0x5c;
  HashCtx outer(suite.hash);
  outer.update(pad);
  outer.update(inner_digest);
  return outer.finalize();
}

Key derive_device_key(const Key& tenant_key, ByteSpan device_id,
                      const CipherSuite& suite) {
  if (device_id.empty()) {
    throw Error(ErrorKind::kInvalidArgument, "empty device id");
  }
  return hmac(tenant_key, {device_id}, suite);
}

Key derive_data_key(const Key& device_key, std::uint32_t key_id,
                    const CipherSuite& suite) {
  ByteArray<4> id{};
  store_le(id, key_id, 4);
  return hmac(device_key, {id}, suite);
}

Nonce compose_nonce(std::uint64_t sector, std::uint64_t counter) {
  check_nonce_range(sector, counter);
  // 96-bit value (sector << 58) | counter, big-endian.
  std::uint64_t hi32 = sector >> 6;                  // top 32 bits
  std::uint64_t lo64 = (sector & 0x3f) << 58 | counter;
  Nonce n{};
  for (int i = 0; i < 4; ++i) {
    n[i] = static_cast<std::uint8_t>(hi32 >> (24 - 8 * i));
  }
  for (int i = 0; i < 8; ++i) {
    n[4 + i] = static_cast<std::uint8_t>(lo64 >> (56 - 8 * i));
  }
  return n;
}

AeadTag seal_sector(const Key& key, std::uint64_t sector,
                    std::uint64_t counter, ByteSpan plaintext,
                    MutableByteSpan ciphertext, const CipherSuite& suite) {
  if (ciphertext.size() != plaintext.size()) {
    throw Error(ErrorKind::kInvalidArgument, "ciphertext buffer size mismatch");
  }
  auto nonce = compose_nonce(sector, counter);
  CipherCtx ctx(EVP_CIPHER_CTX_new());
  int len = 0;
  AeadTag tag{};
  if (EVP_EncryptInit_ex(ctx.get(), cipher_for(suite.aead), nullptr,
                         key.data(), nonce.data()) != 1 ||
      EVP_EncryptUpdate(ctx.get(), ciphertext.data(), &len, plaintext.data(),
                        static_cast<int>(plaintext.size())) != 1 ||
      EVP_EncryptFinal_ex(ctx.get(), ciphertext.data() + len, &len) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), tag_ctrl_get(suite.aead), 16,
                          tag.data()) != 1) {
    throw Error(ErrorKind::kInvalidArgument, "AEAD seal failed");
  }
  return tag;
}

void open_sector(const Key& key, std::uint64_t sector, std::uint64_t counter,
                 ByteSpan ciphertext, ByteSpan tag, MutableByteSpan plaintext,
                 const CipherSuite& suite) {
  if (plaintext.size() != ciphertext.size()) {
    throw Error(ErrorKind::kInvalidArgument, "plaintext buffer size mismatch");
  }
  if (tag.size() < 8 || tag.size() > 16) {
    throw SectorError(ErrorKind::kIntegrity, sector, "bad tag length");
  }
  Nonce nonce;
  try {
    nonce = compose_nonce(sector, counter);
  } catch (const Error&) {
    throw SectorError(ErrorKind::kIntegrity, sector, "nonce out of range");
  }
  CipherCtx ctx(EVP_CIPHER_CTX_new());
  int len = 0;
  Bytes tag_copy(tag.begin(), tag.end());
  bool ok =
      EVP_DecryptInit_ex(ctx.get(), cipher_for(suite.aead), nullptr,
                         key.data(), nonce.data()) == 1 &&
      EVP_DecryptUpdate(ctx.get(), plaintext.data(), &len, ciphertext.data(),
                        static_cast<int>(ciphertext.size())) == 1 &&
      EVP_CIPHER_CTX_ctrl(ctx.get(), tag_ctrl_set(suite.aead),
                          static_cast<int>(tag_copy.size()),
                          tag_copy.data()) == 1 &&
      EVP_DecryptFinal_ex(ctx.get(), plaintext.data() + len, &len) == 1;
  if (!ok) {
    std::fill(plaintext.begin(), plaintext.end(), 0);
    throw SectorError(ErrorKind::kIntegrity, sector,
                      "AEAD authentication failed");
  }
}

NetMac network_mac(const Key& net_key, std::uint64_t iv_counter,
                   std::uint64_t j, const CipherSuite& suite) {
  if (j >= kNetCounterLimit) {
    throw Error(ErrorKind::kInvalidArgument, "net counter exceeds 48 bits");
  }
  ByteArray<14> msg{};
  MutableByteSpan m(msg);
  store_le(m.subspan(0, 8), iv_counter, 8);
  store_le(m.subspan(8, 6), j, 6);
  auto full = hmac(net_key, {msg}, suite);
  NetMac out;
  std::copy_n(full.begin(), out.size(), out.begin());
  return out;
}

namespace {
ByteArray<8> tag_seal(const Key& freshness_key, std::uint64_t sector,
                      std::uint64_t iv_counter, ByteSpan binding,
                      const CipherSuite& suite) {
  ByteArray<16> head{};
  MutableByteSpan h(head);
  store_le(h.subspan(0, 8), sector, 8);
  store_le(h.subspan(8, 8), iv_counter, 8);
  auto full = hmac(freshness_key, {as_bytes("snvme-tag"), head, binding},
                   suite);
  ByteArray<8> out;
  std::copy_n(full.begin(), out.size(), out.begin());
  return out;
}
}  // namespace

Node freshness_tag(const Key& freshness_key, std::uint64_t sector,
                   std::uint64_t iv_counter, const Node& parent,
                   const CipherSuite& suite) {
  ByteArray<16> head{};
  MutableByteSpan h(head);
  store_le(h.subspan(0, 8), sector, 8);
  store_le(h.subspan(8, 8), iv_counter, 8);
  auto full = hmac(freshness_key, {head, parent}, suite);
  Node out;
  std::copy_n(full.begin(), 8, out.begin());
  auto seal = tag_seal(freshness_key, sector, iv_counter,
                       ByteSpan(out).first(8), suite);
  std::copy(seal.begin(), seal.end(), out.begin() + 8);
  return out;
}

bool freshness_tag_authentic(const Key& freshness_key, std::uint64_t sector,
                             std::uint64_t iv_counter, const Node& tag,
                             const CipherSuite& suite) {
  auto seal = tag_seal(freshness_key, sector, iv_counter,
                       ByteSpan(tag).first(8), suite);
  return constant_time_equal(seal, ByteSpan(tag).subspan(8));
}

Node node_hash(std::span<const std::uint64_t> ivs, std::uint32_t width,
               const CipherSuite& suite) {
  if (ivs.size() > width) {
    throw Error(ErrorKind::kInvalidArgument, "iv array longer than data set");
  }
  Bytes buf(8ull * width, 0);
  for (std::size_t i = 0; i < ivs.size(); ++i) {
    store_le(MutableByteSpan(buf).subspan(8 * i, 8), ivs[i], 8);
  }
  auto full = digest(buf, suite);
  Node out;
  std::copy_n(full.begin(), out.size(), out.begin());
  return out;
}

Node tree_node_hash(std::span<const Node> children, std::uint32_t width,
                    const CipherSuite& suite) {
  if (children.size() > width) {
    throw Error(ErrorKind::kInvalidArgument, "too many children");
  }
  Bytes buf(kNodeBytes * width, 0);
  for (std::size_t i = 0; i < children.size(); ++i) {
    std::copy(children[i].begin(), children[i].end(),
              buf.begin() + kNodeBytes * i);
  }
  auto full = digest(buf, suite);
  Node out;
  std::copy_n(full.begin(), out.size(), out.begin());
  return out;
}

bool constant_time_equal(ByteSpan a, ByteSpan b) {
  if (a.size() != b.size()) return false;
  std::uint8_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff |= a[i] ^ b[i];
  return diff == 0;
}

WriteCapacity safe_write_capacity(double block_bytes, unsigned iv_bits,
                                  IvMode mode, double p) {
  if (iv_bits > 256) {
    throw Error(ErrorKind::kInvalidArgument, "iv_bits must be <= 256");
  }
  if (!(block_bytes > 0)) {
    throw Error(ErrorKind::kInvalidArgument, "block size must be positive");
  }
  double blocks = 0;
  if (mode == IvMode::kSequential) {
    blocks = std::ldexp(1.0, static_cast<int>(iv_bits));
  } else {
    if (!(p > 0 && p < 1)) {
      throw Error(ErrorKind::kInvalidArgument, "p must lie in (0, 1)");
    }
    // -log1p(-p) keeps precision for tiny p such as 2^-32.
    blocks = std::sqrt(2.0 * std::ldexp(1.0, static_cast<int>(iv_bits)) *
                       -std::log1p(-p));
  }
  double bytes = blocks * block_bytes;
  if (!std::isfinite(bytes)) return {DBL_MAX, true};
  return {bytes, false};
}

}  // namespace snvme
