#include "snvme/nvstore.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <thread>

#include "snvme/error.hpp"
#include "test_util.hpp"

namespace snvme {
namespace {

using snvme::testing::TempDir;

Key test_key() {
  Key k{};
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = static_cast<std::uint8_t>(i);
  return k;
}

JournalEntry entry(std::uint64_t sector, std::uint64_t o, std::uint64_t n) {
  JournalEntry e;
  e.sector = sector;
  e.old_iv = o;
  e.new_iv = n;
  e.key_id = 7;
  return e;
}

TEST(JournalEntry, FixedLayout) {
  JournalEntry e = entry(0x0102030405060708ull, 0x11, 0x22);
  e.status = JournalStatus::kDataPersisted;
  e.flags = kEntryFlushed;
  auto b = e.encode();
  EXPECT_EQ(to_hex(b),
            "0807060504030201"
            "1100000000000000"
            "2200000000000000"
            "07000000"
            "0201"
            "0000");
  EXPECT_EQ(JournalEntry::decode(b), e);
  b[28] = 4;
  EXPECT_THROW(JournalEntry::decode(b), Error);
  b[28] = 1;
  b[31] = 1;
  EXPECT_THROW(JournalEntry::decode(b), Error);
}

TEST(NvImage, RoundTripAndChecksum) {
  NvImage img;
  img.commit_seq = 42;
  img.root[0] = 0xaa;
  img.freshness_key = test_key();
  img.entries.resize(4);
  img.entries[2] = entry(9, 1, 2);
  img.entries[2].status = JournalStatus::kPending;
  auto b = img.encode();
  EXPECT_EQ(b.size(), 72u + 4 * 32 + 32);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 8), "sNVMeNV1");
  auto back = NvImage::decode(b);
  EXPECT_EQ(back.commit_seq, 42u);
  EXPECT_EQ(back.root, img.root);
  EXPECT_EQ(back.freshness_key, img.freshness_key);
  EXPECT_EQ(back.entries, img.entries);
  for (std::size_t i = 0; i < b.size(); i += 13) {
    auto c = b;
    c[i] ^= 0x10;
    try {
      NvImage::decode(c);
      ADD_FAILURE() << "accepted flip at " << i;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kFreshnessViolation);
    }
  }
}

TEST(NvStore, CommitPersistsAndCrashFreezes) {
  TempDir dir;
  auto path = dir.file("nv");
  Node root{};
  root[1] = 5;
  NvStore::create(path, test_key(), root, 8);
  auto sw = std::make_shared<CrashSwitch>();
  {
    NvStore nv(path, sw);
    EXPECT_EQ(nv.capacity(), 8u);
    EXPECT_EQ(nv.image().root, root);
    nv.commit([](NvImage& i) { i.root[0] = 1; });
    nv.schedule_crash(1);
    nv.commit([](NvImage& i) { i.root[0] = 2; });
    EXPECT_THROW(nv.commit([](NvImage& i) { i.root[0] = 3; }), Error);
    EXPECT_TRUE(sw->crashed());
    EXPECT_THROW(nv.commit([](NvImage& i) { i.root[0] = 4; }), Error);
    EXPECT_EQ(nv.commits(), 2u);
    EXPECT_THROW(nv.commit([](NvImage& i) { i.entries.pop_back(); }), Error);
  }
  NvStore again(path, std::make_shared<CrashSwitch>());
  auto img = again.image();
  EXPECT_EQ(img.root[0], 2);
  EXPECT_EQ(img.commit_seq, 2u);
  EXPECT_EQ(again.freshness_key(), test_key());
}

TEST(NvStore, CorruptFileIsViolation) {
  TempDir dir;
  auto path = dir.file("nv");
  NvStore::create(path, test_key(), Node{}, 4);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(20);
    f.put('\x7f');
  }
  try {
    NvStore nv(path, nullptr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFreshnessViolation);
  }
}

TEST(NvStore, TornCommitFallsBackToPreviousImage) {
  TempDir dir;
  auto path = dir.file("nv");
  NvStore::create(path, test_key(), Node{}, 4);
  const auto slot = NvImage::encoded_size(4);
  EXPECT_EQ(std::filesystem::file_size(path), 2 * slot);
  {
    NvStore nv(path, nullptr);
    nv.commit([](NvImage& i) { i.root[0] = 1; });  // slot 1
    nv.commit([](NvImage& i) { i.root[0] = 2; });  // slot 0
  }
  {
    // Half-written slot 0.
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(slot / 2));
    for (int i = 0; i < 64; ++i) f.put('\x5a');
  }
  NvStore nv(path, nullptr);
  EXPECT_EQ(nv.image().commit_seq, 1u);
  EXPECT_EQ(nv.image().root[0], 1);
  nv.commit([](NvImage& i) { i.root[0] = 3; });  // rewrites slot 0
  NvStore again(path, nullptr);
  EXPECT_EQ(again.image().commit_seq, 2u);
  EXPECT_EQ(again.image().root[0], 3);
}

TEST(NvStore, SwappedSlotsAreViolation) {
  TempDir dir;
  auto path = dir.file("nv");
  NvStore::create(path, test_key(), Node{}, 4);
  { NvStore(path, nullptr).commit([](NvImage& i) { i.root[0] = 1; }); }
  Bytes file;
  {
    std::ifstream in(path, std::ios::binary);
    file.assign(std::istreambuf_iterator<char>(in), {});
  }
  const auto half = file.size() / 2;
  std::rotate(file.begin(), file.begin() + static_cast<long>(half), file.end());
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(file.data()),
              static_cast<std::streamsize>(file.size()));
  }
  try {
    NvStore nv(path, nullptr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFreshnessViolation);
  }
}

struct JournalFixture : ::testing::Test {
  TempDir dir;
  std::unique_ptr<NvStore> nv;
  std::unique_ptr<Journal> j;
  std::vector<std::uint64_t> retired;
  std::mutex mu;

  void open(std::uint32_t cap) {
    NvStore::create(dir.file("nv"), test_key(), Node{}, cap);
    nv = std::make_unique<NvStore>(dir.file("nv"), nullptr);
    j = std::make_unique<Journal>(*nv, [this](std::uint64_t s) {
      std::lock_guard lk(mu);
      retired.push_back(s);
    });
  }
  JournalStatus nv_status(std::uint32_t slot) {
    return nv->image().entries[slot].status;
  }
};

TEST_F(JournalFixture, RootThenFlushRetires) {
  open(4);
  auto slots = j->reserve(2, {});
  ASSERT_EQ(slots.size(), 2u);
  EXPECT_EQ(j->in_use(), 2u);
  JournalEntry es[2] = {entry(10, 0, 5), entry(11, 3, 6)};
  auto seqs = j->begin(slots, es);
  EXPECT_EQ(nv_status(slots[0]), JournalStatus::kPending);
  EXPECT_EQ(nv->image().entries[slots[1]].new_iv, 6u);
  j->mark_persisted(seqs);
  EXPECT_EQ(nv_status(slots[1]), JournalStatus::kDataPersisted);

  std::vector<std::uint64_t> f = seqs;
  j->filter_uncommitted(f);
  EXPECT_EQ(f, seqs);

  Node root{};
  root[3] = 9;
  j->commit_root(root, seqs);
  EXPECT_EQ(nv->image().root, root);
  EXPECT_EQ(nv_status(slots[0]), JournalStatus::kTreeUpdated);
  j->filter_uncommitted(f);
  EXPECT_TRUE(f.empty());
  EXPECT_EQ(j->live(), 2u);
  EXPECT_TRUE(retired.empty());

  std::uint64_t first[1] = {seqs[0]};
  j->mark_flushed(first);
  EXPECT_EQ(retired, std::vector<std::uint64_t>{10});
  EXPECT_EQ(nv_status(slots[0]), JournalStatus::kRetired);
  EXPECT_EQ(nv->image().entries[slots[0]], JournalEntry{});
  EXPECT_EQ(j->live(), 1u);
  EXPECT_EQ(j->in_use(), 1u);
}

TEST_F(JournalFixture, FlushThenRootRetires) {
  open(4);
  auto slots = j->reserve(1, {});
  JournalEntry es[1] = {entry(3, 1, 2)};
  auto seqs = j->begin(slots, es);
  j->mark_persisted(seqs);
  j->mark_flushed(seqs);
  EXPECT_TRUE(nv->image().entries[slots[0]].flushed());
  EXPECT_EQ(nv_status(slots[0]), JournalStatus::kDataPersisted);
  EXPECT_TRUE(retired.empty());
  j->commit_root(Node{}, seqs);
  EXPECT_EQ(retired, std::vector<std::uint64_t>{3});
  EXPECT_TRUE(j->wait_empty(std::chrono::milliseconds(1)));
}

TEST_F(JournalFixture, RootIgnoresPendingAndUnknown) {
  open(4);
  auto slots = j->reserve(1, {});
  JournalEntry es[1] = {entry(3, 1, 2)};
  auto seqs = j->begin(slots, es);
  std::uint64_t bogus[2] = {seqs[0], 999};
  j->commit_root(Node{}, bogus);
  EXPECT_EQ(nv_status(slots[0]), JournalStatus::kPending);
}

TEST_F(JournalFixture, ReserveBackpressure) {
  open(3);
  EXPECT_THROW(j->reserve(4, {}), Error);
  auto a = j->reserve(2, {});
  auto b = j->reserve(1, {});
  std::atomic<int> starved{0};
  std::atomic<bool> got{false};
  std::thread t([&] {
    auto c = j->reserve(2, [&] { ++starved; });
    got = true;
    j->release(c);
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  EXPECT_FALSE(got);
  EXPECT_GT(starved.load(), 0);
  JournalEntry es[2] = {entry(1, 0, 1), entry(2, 0, 1)};
  auto seqs = j->begin(a, es);
  j->mark_persisted(seqs);
  j->mark_flushed(seqs);
  j->commit_root(Node{}, seqs);
  t.join();
  EXPECT_TRUE(got);
  j->release(b);
  EXPECT_EQ(j->in_use(), 0u);
}

TEST_F(JournalFixture, CrashedCommitLeavesMirrorUnchanged) {
  open(4);
  auto slots = j->reserve(1, {});
  JournalEntry es[1] = {entry(3, 1, 2)};
  auto seqs = j->begin(slots, es);
  nv->schedule_crash(0);
  EXPECT_THROW(j->mark_persisted(seqs), Error);
  std::vector<std::uint64_t> f = seqs;
  j->filter_uncommitted(f);
  EXPECT_EQ(f, seqs);
  EXPECT_EQ(nv_status(slots[0]), JournalStatus::kPending);
}

TEST_F(JournalFixture, LiveEntriesRequireRecovery) {
  open(2);
  auto slots = j->reserve(1, {});
  JournalEntry es[1] = {entry(3, 1, 2)};
  j->begin(slots, es);
  EXPECT_THROW(Journal(*nv, {}), Error);
}

}  // namespace
}  // namespace snvme
