#include "snvme/layout.hpp"

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "snvme/error.hpp"

namespace snvme {
namespace {

// Brute-force oracle: smallest D with B - D <= D * S.
std::uint64_t brute_force_data_sets(std::uint64_t b, std::uint64_t s) {
  for (std::uint64_t d = 1;; ++d) {
    if (b - d <= d * s) return d;
  }
}

TEST(ComputeDataSets, ExactlyOneFullSet) {
  EXPECT_EQ(compute_data_sets(341, 340), 1u);
}

TEST(ComputeDataSets, MatchesBruteForce) {
  EXPECT_EQ(brute_force_data_sets(1023, 340), 3u);
  EXPECT_EQ(compute_data_sets(1023, 340), 3u);
  EXPECT_EQ(brute_force_data_sets(342, 340), 2u);
  EXPECT_EQ(compute_data_sets(342, 340), 2u);
  for (std::uint64_t s : {1u, 2u, 7u, 340u}) {
    for (std::uint64_t b = s + 1; b < s * 12 + 40; ++b) {
      auto d = compute_data_sets(b, s);
      ASSERT_EQ(d, brute_force_data_sets(b, s)) << "B=" << b << " S=" << s;
      ASSERT_LE(b - d, d * s);
      ASSERT_GT(b - (d - 1), (d - 1) * s);
    }
  }
}

TEST(ComputeDataSets, RejectsTooSmall) {
  EXPECT_THROW(compute_data_sets(340, 340), Error);
  EXPECT_THROW(compute_data_sets(1, 1), Error);
}

TEST(Geometry, RejectsUnsupportedSizes) {
  EXPECT_THROW(DeviceGeometry::make(4096, 340, 64, 512), Error);
  EXPECT_THROW(DeviceGeometry::make(4096, 340, 32), Error);
  EXPECT_THROW(DeviceGeometry::make(4096, 600), Error);
}

TEST(Geometry, DataToPhysical) {
  auto g = DeviceGeometry::make(1023, 340);
  ASSERT_EQ(g.data_set_count(), 3u);
  EXPECT_EQ(g.data_to_physical(0), 3u);
  EXPECT_EQ(g.data_to_physical(680), 683u);
  EXPECT_THROW(g.data_to_physical(g.data_sector_count()), Error);

  // Bijection onto [D, B).
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < g.data_sector_count(); ++i) {
    seen.insert(g.data_to_physical(i));
  }
  EXPECT_EQ(seen.size(), g.data_sector_count());
  EXPECT_EQ(*seen.begin(), 3u);
  EXPECT_EQ(*seen.rbegin(), 1022u);
}

TEST(Geometry, MetadataLocation) {
  auto g = DeviceGeometry::make(1023, 340);
  EXPECT_EQ(g.metadata_location(0), (MetadataLocation{0, 0}));
  EXPECT_EQ(g.metadata_location(340), (MetadataLocation{1, 0}));
  EXPECT_EQ(g.metadata_location(681), (MetadataLocation{2, 1}));
  EXPECT_THROW(g.metadata_location(1020), Error);

  // Enumeration oracle: walk sectors in order, counting slots per set.
  std::uint64_t ds = 0;
  std::uint32_t slot = 0;
  for (std::uint64_t i = 0; i < g.data_sector_count(); ++i) {
    ASSERT_EQ(g.metadata_location(i), (MetadataLocation{ds, slot}));
    if (++slot == g.data_set_size()) {
      slot = 0;
      ++ds;
    }
  }
}

TEST(Geometry, RegionsNeverCollide) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::uint32_t s = 1 + rng() % 500;
    std::uint64_t b = s + 1 + rng() % 5000;
    auto g = DeviceGeometry::make(b, s);
    for (int k = 0; k < 20; ++k) {
      auto i = rng() % g.data_sector_count();
      ASSERT_GE(g.data_to_physical(i), g.data_set_count());
      ASSERT_LT(g.data_to_physical(i), b);
      ASSERT_LT(g.metadata_location(i).sector, g.data_set_count());
      ASSERT_LT(g.metadata_location(i).offset, s);
    }
  }
}

TEST(Geometry, PartialTrailingDataSet) {
  auto g = DeviceGeometry::make(1023, 340);
  EXPECT_EQ(g.data_set_population(0), 340u);
  EXPECT_EQ(g.data_set_population(2), 1020u - 680u);
  auto g2 = DeviceGeometry::make(16384, 340);
  EXPECT_EQ(g2.data_set_count(), 49u);
  EXPECT_EQ(g2.data_set_population(48), 16335u - 48u * 340u);
}

TEST(Geometry, OverheadIsOneOverSPlusOne) {
  auto g = DeviceGeometry::make(341 * 1000, 340);
  EXPECT_DOUBLE_EQ(g.metadata_overhead(), 1.0 / 341.0);
}

TEST(SectorMetadata64, ZeroRoundTrip) {
  SectorMetadata64 m;
  auto bytes = m.encode();
  EXPECT_TRUE(all_zero(bytes));
  EXPECT_EQ(SectorMetadata64::decode(bytes), m);
  EXPECT_TRUE(m.unwritten());
}

TEST(SectorMetadata64, GoldenVector) {
  SectorMetadata64 m;
  m.iv_counter = 1;
  m.key_id = 2;
  m.aead_tag.fill(0xAA);
  m.freshness_tag.fill(0xAA);
  m.net_mac.fill(0xAA);
  m.net_counter = 3;
  const std::string golden =
      "0100000000000000" "02000000"
      "aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa"
      "aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa"
      "aaaaaaaaaaaaaaaa" "030000000000" "000000000000";
  EXPECT_EQ(to_hex(m.encode()), golden);
  EXPECT_EQ(SectorMetadata64::decode(from_hex(golden)), m);

  auto p = m.persisted();
  EXPECT_EQ(p.net_counter, 0u);
  EXPECT_TRUE(all_zero(p.net_mac));
  EXPECT_EQ(p.aead_tag, m.aead_tag);
}

TEST(SectorMetadata64, DecodeRejectsMalformed) {
  Bytes short_buf(63, 0);
  EXPECT_THROW(SectorMetadata64::decode(short_buf), Error);
  Bytes reserved(64, 0);
  reserved[60] = 1;
  EXPECT_THROW(SectorMetadata64::decode(reserved), Error);
  Bytes big_iv(64, 0);
  big_iv[7] = 0x04;  // bit 58
  EXPECT_THROW(SectorMetadata64::decode(big_iv), Error);
}

TEST(SectorMetadata64, EncodeRejectsOutOfRange) {
  SectorMetadata64 m;
  m.iv_counter = kIvCounterLimit;
  EXPECT_THROW(m.encode(), Error);
  m.iv_counter = 0;
  m.net_counter = kNetCounterLimit;
  EXPECT_THROW(m.encode(), Error);
}

TEST(SectorMetadata64, RandomRoundTripProperty) {
  std::mt19937_64 rng(42);
  for (int i = 0; i < 5000; ++i) {
    SectorMetadata64 m;
    m.iv_counter = rng() % kIvCounterLimit;
    m.key_id = static_cast<std::uint32_t>(rng());
    for (auto& b : m.aead_tag) b = static_cast<std::uint8_t>(rng());
    for (auto& b : m.freshness_tag) b = static_cast<std::uint8_t>(rng());
    for (auto& b : m.net_mac) b = static_cast<std::uint8_t>(rng());
    m.net_counter = rng() % kNetCounterLimit;
    ASSERT_EQ(SectorMetadata64::decode(m.encode()), m);
  }
}

TEST(SectorMetadata16, BoundaryRoundTrip) {
  SectorMetadata16 m;
  m.iv_counter = kLegacyIvCounterLimit - 1;
  m.key_id = kLegacyKeyIdLimit - 1;
  m.aead_tag_trunc.fill(0x5c);
  auto bytes = m.encode();
  EXPECT_EQ(bytes.size(), 16u);
  EXPECT_EQ(SectorMetadata16::decode(bytes), m);

  m.iv_counter = kLegacyIvCounterLimit;
  EXPECT_THROW(m.encode(), Error);
  EXPECT_THROW(SectorMetadata16::decode(Bytes(15, 0)), Error);
}

TEST(SectorMetadata16, RandomRoundTripProperty) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 2000; ++i) {
    SectorMetadata16 m;
    m.iv_counter = rng() % kLegacyIvCounterLimit;
    m.key_id = static_cast<std::uint32_t>(rng() % kLegacyKeyIdLimit);
    for (auto& b : m.aead_tag_trunc) b = static_cast<std::uint8_t>(rng());
    ASSERT_EQ(SectorMetadata16::decode(m.encode()), m);
  }
}

TEST(MetadataSector, RoundTripAndZeroImage) {
  MetadataSector m;
  m.data_set = 5;
  m.ivs.assign(340, 0);
  m.ivs[0] = 9;
  m.ivs[339] = 77;
  auto bytes = m.encode();
  ASSERT_EQ(bytes.size(), kSectorBytes);
  auto back = MetadataSector::decode(bytes, 5, 340);
  EXPECT_EQ(back.ivs, m.ivs);
  EXPECT_THROW(MetadataSector::decode(bytes, 6, 340), Error);

  auto zero = MetadataSector::decode(Bytes(kSectorBytes, 0), 17, 340);
  EXPECT_EQ(zero.data_set, 17u);
  EXPECT_EQ(zero.ivs, std::vector<std::uint64_t>(340, 0));
}

}  // namespace
}  // namespace snvme
