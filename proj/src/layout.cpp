#include "snvme/layout.hpp"

#include <algorithm>
#include <string>

#include "snvme/error.hpp"

namespace snvme {

std::uint64_t compute_data_sets(std::uint64_t total_sectors,
                                std::uint64_t data_set_size) {
  if (data_set_size == 0 || total_sectors <= data_set_size) {
    throw Error(ErrorKind::kGeometry,
                "geometry too small: need more sectors than one data set");
  }
  // B - D <= D * S  <=>  D >= B / (S + 1)
  return (total_sectors + data_set_size) / (data_set_size + 1);
}

DeviceGeometry DeviceGeometry::make(std::uint64_t total_sectors,
                                    std::uint32_t data_set_size,
                                    std::uint32_t metadata_bytes,
                                    std::uint32_t sector_bytes) {
  if (sector_bytes != kSectorBytes) {
    throw Error(ErrorKind::kGeometry,
                "unsupported sector size " + std::to_string(sector_bytes));
  }
  if (metadata_bytes != kMetadataBytes64 && metadata_bytes != kMetadataBytes16) {
    throw Error(ErrorKind::kGeometry,
                "metadata size must be 16 or 64 bytes");
  }
  if (data_set_size == 0 || 8 + 8ull * data_set_size > sector_bytes) {
    throw Error(ErrorKind::kGeometry,
                "data set does not fit in one metadata sector");
  }
  DeviceGeometry g;
  g.total_sectors_ = total_sectors;
  g.sector_bytes_ = sector_bytes;
  g.metadata_bytes_ = metadata_bytes;
  g.data_set_size_ = data_set_size;
  g.data_set_count_ = compute_data_sets(total_sectors, data_set_size);
  return g;
}

std::uint64_t DeviceGeometry::data_to_physical(std::uint64_t data_sector) const {
  if (data_sector >= data_sector_count()) {
    throw Error(ErrorKind::kOutOfRange,
                "data sector " + std::to_string(data_sector) + " out of range");
  }
  return data_set_count_ + data_sector;
}

MetadataLocation DeviceGeometry::metadata_location(
    std::uint64_t data_sector) const {
  if (data_sector >= data_sector_count()) {
    throw Error(ErrorKind::kOutOfRange,
                "data sector " + std::to_string(data_sector) + " out of range");
  }
  return {data_sector / data_set_size_,
          static_cast<std::uint32_t>(data_sector % data_set_size_)};
}

std::uint32_t DeviceGeometry::data_set_population(std::uint64_t ds) const {
  if (ds >= data_set_count_) {
    throw Error(ErrorKind::kOutOfRange, "data set out of range");
  }
  auto first = first_sector_of(ds);
  return static_cast<std::uint32_t>(
      std::min<std::uint64_t>(data_set_size_, data_sector_count() - first));
}

ByteArray<SectorMetadata64::kSize> SectorMetadata64::encode() const {
  if (iv_counter >= kIvCounterLimit) {
    throw Error(ErrorKind::kInvalidArgument, "iv_counter exceeds 58 bits");
  }
  if (net_counter >= kNetCounterLimit) {
    throw Error(ErrorKind::kInvalidArgument, "net_counter exceeds 48 bits");
  }
  ByteArray<kSize> out{};
  MutableByteSpan o(out);
  store_le(o.subspan(0, 8), iv_counter, 8);
  store_le(o.subspan(8, 4), key_id, 4);
  std::copy(aead_tag.begin(), aead_tag.end(), out.begin() + 12);
  std::copy(freshness_tag.begin(), freshness_tag.end(), out.begin() + 28);
  std::copy(net_mac.begin(), net_mac.end(), out.begin() + 44);
  store_le(o.subspan(52, 6), net_counter, 6);
  return out;
}

SectorMetadata64 SectorMetadata64::decode(ByteSpan bytes) {
  if (bytes.size() != kSize) {
    throw Error(ErrorKind::kInvalidArgument, "metadata must be 64 bytes");
  }
  if (!all_zero(bytes.subspan(58, 6))) {
    throw Error(ErrorKind::kInvalidArgument, "reserved metadata bytes set");
  }
  SectorMetadata64 m;
  m.iv_counter = load_le(bytes.subspan(0, 8), 8);
  if (m.iv_counter >= kIvCounterLimit) {
    throw Error(ErrorKind::kInvalidArgument, "iv_counter exceeds 58 bits");
  }
  m.key_id = static_cast<std::uint32_t>(load_le(bytes.subspan(8, 4), 4));
  std::copy_n(bytes.begin() + 12, 16, m.aead_tag.begin());
  std::copy_n(bytes.begin() + 28, 16, m.freshness_tag.begin());
  std::copy_n(bytes.begin() + 44, 8, m.net_mac.begin());
  m.net_counter = load_le(bytes.subspan(52, 6), 6);
  return m;
}

bool SectorMetadata64::unwritten() const { return *this == SectorMetadata64{}; }

SectorMetadata64 SectorMetadata64::persisted() const {
  auto m = *this;
  m.net_mac = {};
  m.net_counter = 0;
  return m;
}

ByteArray<SectorMetadata16::kSize> SectorMetadata16::encode() const {
  if (iv_counter >= kLegacyIvCounterLimit) {
    throw Error(ErrorKind::kInvalidArgument, "iv_counter exceeds 40 bits");
  }
  if (key_id >= kLegacyKeyIdLimit) {
    throw Error(ErrorKind::kInvalidArgument, "key_id exceeds 24 bits");
  }
  ByteArray<kSize> out{};
  MutableByteSpan o(out);
  store_le(o.subspan(0, 5), iv_counter, 5);
  store_le(o.subspan(5, 3), key_id, 3);
  std::copy(aead_tag_trunc.begin(), aead_tag_trunc.end(), out.begin() + 8);
  return out;
}

SectorMetadata16 SectorMetadata16::decode(ByteSpan bytes) {
  if (bytes.size() != kSize) {
    throw Error(ErrorKind::kInvalidArgument, "metadata must be 16 bytes");
  }
  SectorMetadata16 m;
  m.iv_counter = load_le(bytes.subspan(0, 5), 5);
  m.key_id = static_cast<std::uint32_t>(load_le(bytes.subspan(5, 3), 3));
  std::copy_n(bytes.begin() + 8, 8, m.aead_tag_trunc.begin());
  return m;
}

Bytes MetadataSector::encode(std::uint32_t sector_bytes) const {
  if (8 + 8 * ivs.size() > sector_bytes) {
    throw Error(ErrorKind::kInvalidArgument, "iv array exceeds sector");
  }
  Bytes out(sector_bytes, 0);
  MutableByteSpan o(out);
  store_le(o.subspan(0, 8), data_set, 8);
  for (std::size_t i = 0; i < ivs.size(); ++i) {
    store_le(o.subspan(8 + 8 * i, 8), ivs[i], 8);
  }
  return out;
}

MetadataSector MetadataSector::decode(ByteSpan bytes,
                                      std::uint64_t expected_data_set,
                                      std::uint32_t data_set_size) {
  if (8 + 8ull * data_set_size > bytes.size()) {
    throw Error(ErrorKind::kInvalidArgument, "metadata sector too short");
  }
  MetadataSector m;
  m.data_set = expected_data_set;
  m.ivs.assign(data_set_size, 0);
  if (all_zero(bytes)) return m;

  auto stored = load_le(bytes.subspan(0, 8), 8);
  if (stored != expected_data_set) {
    throw Error(ErrorKind::kFreshness,
                "metadata sector belongs to data set " + std::to_string(stored));
  }
  for (std::uint32_t i = 0; i < data_set_size; ++i) {
    m.ivs[i] = load_le(bytes.subspan(8 + 8ull * i, 8), 8);
  }
  if (!all_zero(bytes.subspan(8 + 8ull * data_set_size))) {
    throw Error(ErrorKind::kFreshness, "metadata sector padding not zero");
  }
  return m;
}

}  // namespace snvme
