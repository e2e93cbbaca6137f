#include "snvme/remote_engine.hpp"

#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "snvme/error.hpp"
#include "test_util.hpp"

namespace snvme {
namespace {

using snvme::testing::TempDir;

constexpr std::size_t kRec = 4096 + 64;

Key fkey() {
  Key k{};
  k[0] = 0x42;
  return k;
}

// A record as the host would send it; the remote never opens the AEAD.
Bytes host_record(std::uint64_t iv, std::uint8_t fill, std::uint32_t key_id = 1) {
  Bytes r(kRec, fill);
  SectorMetadata64 m;
  m.iv_counter = iv;
  m.key_id = key_id;
  m.aead_tag.fill(static_cast<std::uint8_t>(fill ^ 0x5a));
  m.net_mac.fill(0x77);
  m.net_counter = 12345;
  auto e = m.encode();
  std::copy(e.begin(), e.end(), r.begin() + 4096);
  return r;
}

SectorMetadata64 meta_at(const Bytes& recs, std::size_t i) {
  return SectorMetadata64::decode(ByteSpan(recs).subspan(i * kRec + 4096, 64));
}

// Independent rebuild from the aggregated sectors on disk.
std::vector<std::vector<Node>> rebuild_from_disk(SimDevice& dev,
                                                 std::uint32_t branching) {
  const auto& g = dev.geometry();
  std::vector<Node> level(g.data_set_count());
  for (std::uint64_t ds = 0; ds < g.data_set_count(); ++ds) {
    auto rec = dev.read_sectors(ds, 1);
    std::vector<std::uint64_t> ivs(g.data_set_size());
    for (std::size_t i = 0; i < ivs.size(); ++i) {
      ivs[i] = load_le(ByteSpan(rec).subspan(8 + 8 * i), 8);
    }
    level[ds] = node_hash(ivs, g.data_set_size());
  }
  std::vector<std::vector<Node>> out{level};
  do {
    std::vector<Node> up;
    for (std::size_t i = 0; i < level.size(); i += branching) {
      std::vector<Node> kids(level.begin() + i,
                             level.begin() + std::min(level.size(), i + branching));
      up.push_back(tree_node_hash(kids, branching));
    }
    level = up;
    out.push_back(level);
  } while (level.size() > 1);
  return out;
}

struct RemoteFixture : ::testing::Test {
  TempDir dir;
  std::unique_ptr<SimDevice> dev;
  std::unique_ptr<RemoteEngine> eng;
  RemoteConfig cfg;

  void make(std::uint64_t sectors = 4096) {
    auto g = DeviceGeometry::make(sectors);
    SimDevice::create(dir.file("dev"), g);
    dev = std::make_unique<SimDevice>(dir.file("dev"), g);
    RemoteEngine::format(*dev, dir.file("nv"), fkey(), cfg.tree_branching);
    open();
  }
  void open() { eng = std::make_unique<RemoteEngine>(*dev, dir.file("nv"), cfg); }
  void write1(std::uint64_t s, std::uint64_t iv, std::uint8_t fill = 1) {
    eng->write(s, host_record(iv, fill));
  }
  ErrorKind read_error(std::uint64_t s) {
    try {
      eng->read(s, 1);
    } catch (const SectorError& e) {
      EXPECT_EQ(e.sector(), s);
      return e.kind();
    }
    return ErrorKind::kInvalidArgument;
  }
};

TEST_F(RemoteFixture, WriteReadFastPath) {
  make();
  write1(5, 100, 0xab);
  auto before = eng->stats();
  auto r = eng->read(5, 1);
  auto after = eng->stats();
  EXPECT_EQ(after.fast_hits - before.fast_hits, 1u);
  EXPECT_EQ(after.full_path, before.full_path);
  auto m = meta_at(r, 0);
  EXPECT_EQ(m.iv_counter, 100u);
  EXPECT_EQ(m.net_counter, 0u);
  EXPECT_EQ(m.net_mac, NetMac{});
  EXPECT_EQ(r[0], 0xab);
  EXPECT_EQ(m.freshness_tag,
            freshness_tag(fkey(), 5, 100, eng->tree().level1(0)));
}

TEST_F(RemoteFixture, UnwrittenReadsBlank) {
  make();
  auto r = eng->read(10, 3);
  EXPECT_TRUE(all_zero(r));
  EXPECT_EQ(eng->stats().unwritten_reads, 3u);
}

TEST_F(RemoteFixture, SiblingWriteForcesFullPath) {
  make();
  write1(1, 10);
  write1(2, 11);
  auto s0 = eng->stats();
  eng->read(1, 1);
  auto s1 = eng->stats();
  EXPECT_EQ(s1.full_path - s0.full_path, 1u);
  eng->read(2, 1);
  EXPECT_EQ(eng->stats().fast_hits - s1.fast_hits, 1u);
}

TEST_F(RemoteFixture, RejectsBadWrites) {
  make();
  EXPECT_THROW(eng->write(0, host_record(0, 1)), Error);
  EXPECT_THROW(eng->write(eng->geometry().data_sector_count(), host_record(1, 1)),
               Error);
  Bytes partial(100);
  EXPECT_THROW(eng->write(0, partial), Error);
  auto bad = host_record(3, 1);
  bad[4096 + 60] = 1;
  EXPECT_THROW(eng->write(0, bad), Error);
  // A rejected write leaves no lock behind.
  write1(0, 4);
  EXPECT_EQ(meta_at(eng->read(0, 1), 0).iv_counter, 4u);
}

TEST_F(RemoteFixture, RollbackIsFreshnessError) {
  make();
  write1(7, 1, 0x10);
  auto snap = dev->snapshot();
  write1(7, 2, 0x20);
  dev->restore_sectors(snap, eng->geometry().data_to_physical(7), 1);
  EXPECT_EQ(read_error(7), ErrorKind::kFreshness);
}

TEST_F(RemoteFixture, RollbackToBlankIsFreshnessError) {
  make();
  auto snap = dev->snapshot();
  write1(9, 3);
  dev->restore_sectors(snap, eng->geometry().data_to_physical(9), 1);
  EXPECT_EQ(read_error(9), ErrorKind::kFreshness);
}

TEST_F(RemoteFixture, MetadataFlipsAreCaught) {
  make();
  std::mt19937_64 rng(11);
  const auto& g = eng->geometry();
  for (int t = 0; t < 300; ++t) {
    std::uint64_t s = rng() % 700;
    write1(s, 1000 + t, static_cast<std::uint8_t>(t));
    if (rng() % 2) write1(s + 1, 5000 + t);  // make some tags stale
    // iv bytes 0..7 (low 58 bits meaningful), freshness tag 28..43,
    // net/reserved 44..63
    std::uint32_t byte;
    switch (rng() % 3) {
      case 0: byte = 4096 + rng() % 7; break;
      case 1: byte = 4096 + 28 + rng() % 16; break;
      default: byte = 4096 + 44 + rng() % 20; break;
    }
    auto snap = dev->snapshot();
    dev->flip_bit(g.data_to_physical(s), byte, rng() % 8);
    auto k = read_error(s);
    EXPECT_TRUE(k == ErrorKind::kFreshness || k == ErrorKind::kIntegrity)
        << "byte " << byte;
    dev->restore(snap);
    dev->drop_snapshot(snap);
  }
}

TEST_F(RemoteFixture, AggregatedSectorTamperDetectedOnLoad) {
  cfg.cache_lines = 1;
  make();
  write1(3, 9);
  write1(400, 9);  // evicts data set 0 (written back)
  eng->drain();
  dev->flip_bit(0, 8 + 3 * 8, 0);  // IV of sector 3 in the aggregated sector
  write1(401, 10);
  // reloading data set 0 checks it against level 1
  try {
    write1(4, 12);
    FAIL();
  } catch (const SectorError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFreshness);
  }
  write1(402, 11);  // other data sets keep working
}

TEST_F(RemoteFixture, SequentialFillTouchesOneLine) {
  make();
  auto before = eng->stats().cache;
  for (std::uint64_t s = 0; s < 340; ++s) write1(s, s + 1);
  auto after = eng->stats().cache;
  EXPECT_EQ(after.misses - before.misses, 1u);
  EXPECT_EQ(eng->stats().cache.evictions, 0u);
}

TEST_F(RemoteFixture, RefreshTags) {
  make();
  for (std::uint64_t s = 0; s < 50; ++s) write1(s, s + 1);
  EXPECT_EQ(eng->refresh_tags(0, 1), 50u);
  EXPECT_EQ(eng->refresh_tags(1, 1), 0u);
  auto s0 = eng->stats();
  eng->read(0, 50);
  auto s1 = eng->stats();
  EXPECT_EQ(s1.fast_hits - s0.fast_hits, 50u);
  EXPECT_EQ(s1.full_path, s0.full_path);
  // refresh does not launder a rollback
  auto snap = dev->snapshot();
  write1(3, 99);
  dev->restore_sectors(snap, eng->geometry().data_to_physical(3), 1);
  EXPECT_THROW(eng->refresh_tags(0, 1), Error);
}

void drain_matches_rebuild(RemoteFixture& f, int writes, unsigned threads) {
  std::vector<std::thread> th;
  std::atomic<std::uint64_t> iv{1};
  for (unsigned w = 0; w < threads; ++w) {
    th.emplace_back([&, w] {
      std::mt19937_64 rng(w + 1);
      for (int i = 0; i < writes; ++i) {
        auto n = 1 + rng() % 4;
        auto s = rng() % (f.eng->geometry().data_sector_count() - n);
        Bytes recs;
        for (std::uint64_t k = 0; k < n; ++k) {
          auto r = host_record(iv++, static_cast<std::uint8_t>(k));
          recs.insert(recs.end(), r.begin(), r.end());
        }
        f.eng->write(s, recs);
      }
    });
  }
  for (auto& t : th) t.join();
  f.eng->drain();
  EXPECT_EQ(f.eng->journal_live(), 0u);
  auto want = rebuild_from_disk(*f.dev, f.cfg.tree_branching);
  EXPECT_EQ(f.eng->tree_snapshot(), want);
  EXPECT_EQ(f.eng->persisted_root(), want.back()[0]);
}

TEST_F(RemoteFixture, DrainEqualsRebuildEc) {
  make();
  drain_matches_rebuild(*this, 300, 4);
  EXPECT_GT(eng->stats().propagations, 0u);
}

TEST_F(RemoteFixture, DrainEqualsRebuildSync) {
  cfg.eventual_consistency = false;
  make();
  drain_matches_rebuild(*this, 200, 4);
}

TEST_F(RemoteFixture, DrainEqualsRebuildWithEvictions) {
  cfg.cache_lines = 2;
  cfg.tree_branching = 2;
  make();
  drain_matches_rebuild(*this, 200, 3);
  EXPECT_GT(eng->stats().cache.evictions, 0u);
  // everything still reads back
  for (std::uint64_t s = 0; s < eng->geometry().data_sector_count(); s += 97) {
    eng->read(s, 1);
  }
}

TEST_F(RemoteFixture, SameSectorWritesSerialize) {
  make();
  std::atomic<std::uint64_t> ack{0};
  std::vector<std::pair<std::uint64_t, std::uint64_t>> acks[2];
  std::vector<std::thread> th;
  for (int w = 0; w < 2; ++w) {
    th.emplace_back([&, w] {
      for (int i = 0; i < 40; ++i) {
        std::uint64_t iv = 1 + w * 1000 + i;
        write1(77, iv);
        acks[w].push_back({ack++, iv});
      }
    });
  }
  for (auto& t : th) t.join();
  auto last = std::max(acks[0].back(), acks[1].back());
  EXPECT_EQ(meta_at(eng->read(77, 1), 0).iv_counter, last.second);
  eng->drain();
  EXPECT_EQ(eng->tree_snapshot(), rebuild_from_disk(*dev, 16));
}

TEST_F(RemoteFixture, ReopenAfterCleanShutdown) {
  make();
  for (std::uint64_t s = 0; s < 30; ++s) write1(s * 11, s + 1);
  auto root = eng->root();
  eng.reset();
  open();
  EXPECT_EQ(eng->root(), root);
  EXPECT_EQ(eng->recovery_report().journal_entries, 0u);
  EXPECT_EQ(meta_at(eng->read(22, 1), 0).iv_counter, 3u);
}

TEST_F(RemoteFixture, CrashThenRecover) {
  make();
  for (std::uint64_t s = 0; s < 10; ++s) write1(s, s + 1);
  dev->schedule_crash(3);
  EXPECT_THROW(
      {
        for (std::uint64_t s = 10; s < 40; ++s) write1(s * 3, 100 + s);
      },
      Error);
  eng->halt();
  eng.reset();
  dev->reopen();
  cfg.deep_scan = true;
  open();
  EXPECT_GT(eng->recovery_report().journal_entries, 0u);
  EXPECT_EQ(eng->tree_snapshot(), rebuild_from_disk(*dev, 16));
  EXPECT_EQ(eng->persisted_root(), eng->root());
  for (std::uint64_t s = 0; s < 10; ++s) {
    EXPECT_EQ(meta_at(eng->read(s, 1), 0).iv_counter, s + 1);
  }
}

TEST_F(RemoteFixture, TamperWhileDownIsViolation) {
  make();
  for (std::uint64_t s = 0; s < 10; ++s) write1(s, s + 1);
  eng->drain();
  auto snap = dev->snapshot();
  write1(4, 50);
  eng->drain();
  eng->halt();
  eng.reset();
  dev->restore_sectors(snap, 0, 1);  // aggregated sector 0 rolled back
  try {
    open();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFreshnessViolation);
  }
}

TEST_F(RemoteFixture, StoreModeIsPlain) {
  cfg.mode = RemoteMode::kStore;
  auto g = DeviceGeometry::make(1024);
  SimDevice::create(dir.file("dev"), g);
  dev = std::make_unique<SimDevice>(dir.file("dev"), g);
  eng = std::make_unique<RemoteEngine>(*dev, "", cfg);
  write1(3, 8, 0x33);
  auto r = eng->read(3, 1);
  EXPECT_EQ(r[0], 0x33);
  EXPECT_EQ(meta_at(r, 0).net_counter, 0u);
}

}  // namespace
}  // namespace snvme
