#pragma once

// Device addressing: a device of B physical sectors is split into D metadata
// sectors (one per data set of S data sectors) followed by B - D data sectors.
// Data sector i lives at physical sector D + i; its aggregated IV lives in
// metadata sector i / S at slot i % S.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "snvme/bytes.hpp"

namespace snvme {

inline constexpr std::uint32_t kSectorBytes = 4096;
inline constexpr std::uint32_t kDefaultDataSetSize = 340;
inline constexpr std::uint32_t kMetadataBytes64 = 64;
inline constexpr std::uint32_t kMetadataBytes16 = 16;

inline constexpr std::uint64_t kIvCounterLimit = std::uint64_t{1} << 58;
inline constexpr std::uint64_t kNetCounterLimit = std::uint64_t{1} << 48;
inline constexpr std::uint64_t kLegacyIvCounterLimit = std::uint64_t{1} << 40;
inline constexpr std::uint32_t kLegacyKeyIdLimit = 1u << 24;

/// Minimal D with B - D <= D * S. Throws Error(kGeometry) when B <= S.
std::uint64_t compute_data_sets(std::uint64_t total_sectors,
                                std::uint64_t data_set_size);

struct MetadataLocation {
  std::uint64_t sector;  // metadata sector (== data set index)
  std::uint32_t offset;  // slot within the aggregated IV array

  friend bool operator==(const MetadataLocation&,
                         const MetadataLocation&) = default;
};

class DeviceGeometry {
 public:
  static DeviceGeometry make(std::uint64_t total_sectors,
                             std::uint32_t data_set_size = kDefaultDataSetSize,
                             std::uint32_t metadata_bytes = kMetadataBytes64,
                             std::uint32_t sector_bytes = kSectorBytes);

  std::uint64_t total_sectors() const { return total_sectors_; }
  std::uint32_t sector_bytes() const { return sector_bytes_; }
  std::uint32_t metadata_bytes() const { return metadata_bytes_; }
  std::uint32_t data_set_size() const { return data_set_size_; }
  std::uint64_t data_set_count() const { return data_set_count_; }
  std::uint64_t data_sector_count() const {
    return total_sectors_ - data_set_count_;
  }
  /// Bytes of one extended LBA (sector + inline metadata).
  std::uint32_t record_bytes() const { return sector_bytes_ + metadata_bytes_; }
  bool legacy_metadata() const { return metadata_bytes_ == kMetadataBytes16; }

  std::uint64_t data_to_physical(std::uint64_t data_sector) const;
  MetadataLocation metadata_location(std::uint64_t data_sector) const;
  /// Number of data sectors actually present in data set `ds` (the last one
  /// may be partial).
  std::uint32_t data_set_population(std::uint64_t ds) const;
  std::uint64_t first_sector_of(std::uint64_t ds) const {
    return ds * data_set_size_;
  }

  /// D / B: fraction of the device spent on aggregated-IV sectors.
  double metadata_overhead() const {
    return static_cast<double>(data_set_count_) /
           static_cast<double>(total_sectors_);
  }

  friend bool operator==(const DeviceGeometry&,
                         const DeviceGeometry&) = default;

 private:
  DeviceGeometry() = default;

  std::uint64_t total_sectors_ = 0;
  std::uint32_t sector_bytes_ = kSectorBytes;
  std::uint32_t metadata_bytes_ = kMetadataBytes64;
  std::uint32_t data_set_size_ = kDefaultDataSetSize;
  std::uint64_t data_set_count_ = 0;
};

/// Per-sector extended-LBA metadata, 64-byte format.
///
/// Offsets (little-endian): 0..7 iv_counter, 8..11 key_id, 12..27 aead_tag,
/// 28..43 freshness_tag, 44..51 net_mac, 52..57 net_counter, 58..63 reserved.
struct SectorMetadata64 {
  static constexpr std::size_t kSize = 64;

  std::uint64_t iv_counter = 0;
  std::uint32_t key_id = 0;
  ByteArray<16> aead_tag{};
  ByteArray<16> freshness_tag{};
  ByteArray<8> net_mac{};
  std::uint64_t net_counter = 0;

  ByteArray<kSize> encode() const;
  static SectorMetadata64 decode(ByteSpan bytes);

  /// All fields zero: the state of a sector that was never written.
  bool unwritten() const;
  /// Copy with the transport-only fields cleared, as persisted on disk.
  SectorMetadata64 persisted() const;

  friend bool operator==(const SectorMetadata64&,
                         const SectorMetadata64&) = default;
};

/// Legacy 16-byte format: 0..4 iv_counter (40 bits), 5..7 key_id (24 bits),
/// 8..15 truncated AEAD tag.
struct SectorMetadata16 {
  static constexpr std::size_t kSize = 16;

  std::uint64_t iv_counter = 0;
  std::uint32_t key_id = 0;
  ByteArray<8> aead_tag_trunc{};

  ByteArray<kSize> encode() const;
  static SectorMetadata16 decode(ByteSpan bytes);

  friend bool operator==(const SectorMetadata16&,
                         const SectorMetadata16&) = default;
};

/// Aggregated IVs of one data set as stored in its metadata sector:
/// 0..7 data set index, then S 8-byte iv counters, then zero padding.
/// An all-zero sector decodes as the empty image of any data set.
struct MetadataSector {
  std::uint64_t data_set = 0;
  std::vector<std::uint64_t> ivs;  // exactly S entries

  Bytes encode(std::uint32_t sector_bytes = kSectorBytes) const;
  static MetadataSector decode(ByteSpan bytes, std::uint64_t expected_data_set,
                               std::uint32_t data_set_size);
};

}  // namespace snvme
