#include "snvme/kbs.hpp"

#include <gtest/gtest.h>

#include <set>
#include <thread>

#include "snvme/error.hpp"
#include "test_util.hpp"

namespace snvme {
namespace {

using snvme::testing::TempDir;

constexpr std::uint64_t kSpace = std::uint64_t{1} << 58;

Key test_key(std::uint8_t fill) {
  Key k;
  k.fill(fill);
  return k;
}

TEST(CounterLedger, FreshLedgerOwnsWholeSpace) {
  CounterLedger l;
  EXPECT_EQ(l.free_ranges(), (std::vector<CounterRange>{{0, kSpace}}));
  EXPECT_EQ(l.outstanding_units(), 0u);
  EXPECT_FALSE(l.check_invariants());
}

TEST(CounterLedger, TerabyteLease) {
  EXPECT_EQ(kTerabyteLeaseUnits, 268435456u);
  CounterLedger l;
  auto r = l.lease("a", kTerabyteLeaseUnits);
  EXPECT_EQ(r, (std::vector<CounterRange>{{0, 268435456}}));
  EXPECT_EQ(l.free_ranges(),
            (std::vector<CounterRange>{{268435456, kSpace}}));
}

TEST(CounterLedger, ReturnedRangesMergeAndLeaseFromFront) {
  CounterLedger l;
  l.lease("a", 100);
  l.lease("b", 100);
  l.lease("c", 100);
  l.give_back("a", {{0, 100}});
  l.give_back("b", {{100, 200}});
  EXPECT_EQ(l.free_ranges(),
            (std::vector<CounterRange>{{0, 200}, {300, kSpace}}));
  auto r = l.lease("d", 150);
  EXPECT_EQ(r, (std::vector<CounterRange>{{0, 150}}));
  auto s = l.lease("d", 100);
  EXPECT_EQ(s, (std::vector<CounterRange>{{150, 200}, {300, 350}}));
  EXPECT_FALSE(l.check_invariants());
}

TEST(CounterLedger, PartialReturnKeepsRemainder) {
  CounterLedger l;
  l.lease("a", 100);
  l.give_back("a", {{50, 100}});
  EXPECT_EQ(l.outstanding("a"), (std::vector<CounterRange>{{0, 50}}));
  EXPECT_EQ(l.free_ranges(), (std::vector<CounterRange>{{50, kSpace}}));
}

TEST(CounterLedger, RejectsForeignAndDoubleReturns) {
  CounterLedger l;
  l.lease("a", 100);
  l.lease("b", 100);
  EXPECT_THROW(l.give_back("a", {{100, 150}}), Error);
  EXPECT_THROW(l.give_back("c", {{0, 1}}), Error);
  l.give_back("a", {{0, 10}});
  EXPECT_THROW(l.give_back("a", {{0, 10}}), Error);
  // All-or-nothing: a valid range paired with an invalid one changes nothing.
  auto before = l.to_json();
  EXPECT_THROW(l.give_back("a", {{10, 20}, {10, 20}}), Error);
  EXPECT_EQ(l.to_json(), before);
}

TEST(CounterLedger, ExhaustionThrows) {
  CounterLedger l(1000);
  l.lease("a", 1000);
  EXPECT_THROW(l.lease("a", 1), Error);
  try {
    l.lease("b", 1);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kLedger);
  }
}

TEST(CounterLedger, JsonRoundTrip) {
  CounterLedger l;
  l.lease("a", 77);
  l.lease("b", 5);
  l.give_back("a", {{3, 9}});
  auto copy = CounterLedger::from_json(l.to_json());
  EXPECT_EQ(copy.to_json(), l.to_json());
  EXPECT_THROW(CounterLedger::from_json(
                   R"({"space":10,"free":[[0,5]],"outstanding":{}})"),
               Error);
}

// Reference model: one owner slot per counter in a small space.
TEST(CounterLedger, MatchesPerCounterModel) {
  constexpr std::uint64_t kSmall = 512;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    CounterLedger l(kSmall);
    std::vector<int> owner(kSmall, -1);
    for (int op = 0; op < 400; ++op) {
      int who = static_cast<int>(rng() % 4);
      std::string name = "l" + std::to_string(who);
      if (rng() % 2) {
        std::uint64_t n = 1 + rng() % 40;
        std::uint64_t free = std::count(owner.begin(), owner.end(), -1);
        if (n > free) {
          EXPECT_THROW(l.lease(name, n), Error);
          continue;
        }
        std::uint64_t want = n;
        for (std::uint64_t c = 0; c < kSmall && want; ++c) {
          if (owner[c] == -1) {
            owner[c] = who;
            --want;
          }
        }
        l.lease(name, n);
      } else {
        std::uint64_t a = rng() % kSmall, b = a + 1 + rng() % 16;
        if (b > kSmall) b = kSmall;
        bool owned = true;
        for (auto c = a; c < b; ++c) owned &= owner[c] == who;
        if (owned) {
          l.give_back(name, {{a, b}});
          for (auto c = a; c < b; ++c) owner[c] = -1;
        } else {
          EXPECT_THROW(l.give_back(name, {{a, b}}), Error);
        }
      }
      ASSERT_FALSE(l.check_invariants());
    }
    for (int who = 0; who < 4; ++who) {
      std::vector<int> got(kSmall, 0);
      for (auto& r : l.outstanding("l" + std::to_string(who))) {
        for (auto c = r.start; c < r.end; ++c) got[c] = 1;
      }
      for (std::uint64_t c = 0; c < kSmall; ++c) {
        ASSERT_EQ(got[c] == 1, owner[c] == who) << "counter " << c;
      }
    }
  }
}

class BrokerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    broker.register_tenant("t0", test_key(0x11));
    broker.register_device("dev0");
  }
  KeyBroker broker;
};

TEST_F(BrokerTest, DuplicateDeviceRejected) {
  EXPECT_THROW(broker.register_device("dev0"), Error);
  EXPECT_TRUE(broker.has_device("dev0"));
  EXPECT_FALSE(broker.has_device("dev1"));
}

TEST_F(BrokerTest, ProvisionDerivesDeviceKey) {
  AuthContext ok{true, "peer"};
  auto k = broker.provision_tenant_keys(ok, "t0", "dev0");
  EXPECT_EQ(k, derive_device_key(test_key(0x11), as_bytes("dev0")));
  EXPECT_NE(k, test_key(0x11));
}

TEST_F(BrokerTest, UnauthenticatedOrUnknownRejected) {
  try {
    broker.provision_tenant_keys(AuthContext{}, "t0", "dev0");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kAuth);
  }
  AuthContext ok{true, "p"};
  EXPECT_THROW(broker.provision_tenant_keys(ok, "nobody", "dev0"), Error);
  EXPECT_THROW(broker.provision_tenant_keys(ok, "t0", "nodev"), Error);
  EXPECT_THROW(broker.lease_counters("nodev", "a", 1), Error);
}

TEST_F(BrokerTest, DevicesHaveIndependentLedgers) {
  broker.register_device("dev1");
  auto a = broker.lease_counters("dev0", "x", 10);
  auto b = broker.lease_counters("dev1", "x", 10);
  EXPECT_EQ(a[0].range, b[0].range);
  EXPECT_EQ(a[0].device_id, "dev0");
  EXPECT_EQ(b[0].device_id, "dev1");
}

TEST(Broker, StatePersistsAcrossRestart) {
  TempDir dir;
  auto state = dir.file("kbs.json");
  {
    KeyBroker b(state);
    b.register_tenant("t", test_key(3));
    b.register_device("d");
    b.lease_counters("d", "l1", 500);
    b.lease_counters("d", "l2", 20);
    b.return_counters("d", "l1", {{100, 200}});
  }
  KeyBroker b(state);
  EXPECT_TRUE(b.has_device("d"));
  auto l = b.ledger_snapshot("d");
  EXPECT_EQ(l.outstanding("l1"),
            (std::vector<CounterRange>{{0, 100}, {200, 500}}));
  EXPECT_EQ(l.outstanding("l2"), (std::vector<CounterRange>{{500, 520}}));
  auto next = b.lease_counters("d", "l3", 50);
  EXPECT_EQ(next[0].range, (CounterRange{100, 150}));
  EXPECT_EQ(b.provision_tenant_keys({true, "p"}, "t", "d"),
            derive_device_key(test_key(3), as_bytes("d")));
}

TEST(Broker, ConcurrentLesseesStayDisjointAndConserved) {
  KeyBroker broker;
  broker.register_device("d");
  constexpr int kLessees = 4;
  constexpr int kOps = 10000;
  std::vector<std::vector<CounterRange>> held(kLessees);
  std::vector<std::thread> threads;
  for (int t = 0; t < kLessees; ++t) {
    threads.emplace_back([&, t] {
      std::mt19937_64 rng(100 + t);
      std::string me = "lessee" + std::to_string(t);
      auto& mine = held[t];
      for (int op = 0; op < kOps / kLessees; ++op) {
        if (mine.empty() || rng() % 3 != 0) {
          for (auto& lr : broker.lease_counters("d", me, 1 + rng() % 64)) {
            mine.push_back(lr.range);
          }
        } else {
          auto i = rng() % mine.size();
          auto r = mine[i];
          // Return either the whole range or its back half.
          if (r.size() > 1 && rng() % 2) {
            auto mid = r.start + r.size() / 2;
            broker.return_counters("d", me, {{mid, r.end}});
            mine[i].end = mid;
          } else {
            broker.return_counters("d", me, {r});
            mine.erase(mine.begin() + static_cast<std::ptrdiff_t>(i));
          }
        }
      }
    });
  }
  for (auto& th : threads) th.join();

  auto ledger = broker.ledger_snapshot("d");
  ASSERT_FALSE(ledger.check_invariants()) << *ledger.check_invariants();
  std::uint64_t sum = 0;
  std::set<std::pair<std::uint64_t, std::uint64_t>> all;
  for (int t = 0; t < kLessees; ++t) {
    std::uint64_t mine = 0;
    for (auto& r : held[t]) {
      mine += r.size();
      all.insert({r.start, r.end});
    }
    std::uint64_t ledger_mine = 0;
    for (auto& r : ledger.outstanding("lessee" + std::to_string(t))) {
      ledger_mine += r.size();
    }
    EXPECT_EQ(mine, ledger_mine);
    sum += mine;
  }
  std::uint64_t prev = 0;
  for (auto& [s, e] : all) {
    EXPECT_GE(s, prev);
    prev = e;
  }
  EXPECT_EQ(sum + ledger.free_units(), kSpace);
  EXPECT_EQ(sum, ledger.outstanding_units());
  // Return everything: the free list compacts to a single range.
  for (int t = 0; t < kLessees; ++t) {
    broker.return_counters("d", "lessee" + std::to_string(t), held[t]);
  }
  EXPECT_EQ(broker.ledger_snapshot("d").free_ranges(),
            (std::vector<CounterRange>{{0, kSpace}}));
}

}  // namespace
}  // namespace snvme
