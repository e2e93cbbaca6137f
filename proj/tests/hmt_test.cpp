#include "snvme/hmt.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>
#include <thread>

#include "snvme/error.hpp"
#include "snvme/layout.hpp"

namespace snvme {
namespace {

Node leaf(std::uint64_t seed) {
  std::uint64_t ivs[3] = {seed, seed * 7 + 1, seed ^ 0x55};
  return node_hash(ivs, kDefaultDataSetSize);
}

// Independent bottom-up rebuild that hashes every group from scratch.
Node naive_root(const std::vector<Node>& level1, std::uint32_t b) {
  std::vector<Node> cur = level1;
  bool first = true;
  while (cur.size() > 1 || first) {
    first = false;
    std::vector<Node> up;
    for (std::size_t i = 0; i < cur.size(); i += b) {
      std::vector<Node> group(cur.begin() + i,
                              cur.begin() + std::min(cur.size(), i + b));
      up.push_back(tree_node_hash(group, b));
    }
    cur = std::move(up);
  }
  return cur[0];
}

TEST(TreeShape, LevelSizes) {
  EXPECT_EQ(tree_level_sizes(1, 16), (std::vector<std::uint64_t>{1, 1}));
  EXPECT_EQ(tree_level_sizes(16, 16), (std::vector<std::uint64_t>{16, 1}));
  EXPECT_EQ(tree_level_sizes(17, 16), (std::vector<std::uint64_t>{17, 2, 1}));
  EXPECT_EQ(tree_level_sizes(49, 16), (std::vector<std::uint64_t>{49, 4, 1}));
  EXPECT_EQ(tree_level_sizes(257, 16),
            (std::vector<std::uint64_t>{257, 17, 2, 1}));
  EXPECT_THROW(tree_level_sizes(0, 16), Error);
  EXPECT_THROW(tree_level_sizes(4, 1), Error);
}

TEST(TreeShape, PetabyteSizing) {
  auto t = tree_sizing(1e15, kDefaultDataSetSize, kDefaultTreeBranching);
  EXPECT_EQ(t.sectors, 244140625000ull);
  EXPECT_EQ(t.data_sets, compute_data_sets(t.sectors, kDefaultDataSetSize));
  EXPECT_GE(t.bytes, 11.5e9);
  EXPECT_LE(t.bytes, 12.65e9);
  std::uint64_t sum = 0;
  for (auto n : t.level_nodes) sum += n;
  EXPECT_EQ(sum, t.total_nodes);
  EXPECT_EQ(t.level_nodes.back(), 1u);
}

TEST(TreeShape, GlobalIndexTopDown) {
  std::vector<Node> l1(40);
  HazelMerkleTree t(l1, 4);
  // sizes: 40, 10, 3, 1
  ASSERT_EQ(t.levels(), 4u);
  EXPECT_EQ(t.global_index(4, 0), 0u);
  EXPECT_EQ(t.global_index(3, 0), 1u);
  EXPECT_EQ(t.global_index(2, 0), 4u);
  EXPECT_EQ(t.global_index(1, 0), 14u);
  EXPECT_EQ(t.global_index(1, 39), 53u);
}

TEST(Tree, BuildMatchesNaive) {
  for (std::uint64_t n : {1, 2, 15, 16, 17, 49, 300}) {
    std::vector<Node> l1;
    for (std::uint64_t i = 0; i < n; ++i) l1.push_back(leaf(i));
    auto levels = build_tree(l1, 16);
    EXPECT_EQ(levels.back().size(), 1u);
    EXPECT_EQ(levels.back()[0], naive_root(l1, 16)) << n;
    HazelMerkleTree t(l1, 16);
    EXPECT_EQ(t.root(), levels.back()[0]);
    EXPECT_EQ(t.snapshot(), levels);
  }
}

TEST(Tree, PropagateMatchesRebuildAndCommitsSeqs) {
  std::mt19937_64 rng(3);
  std::vector<Node> l1(100);
  HazelMerkleTree t(l1, 4);
  std::set<std::uint64_t> committed;
  Node last_root{};
  auto filter = [&](std::vector<std::uint64_t>& v) {
    std::erase_if(v, [&](auto s) { return committed.count(s) > 0; });
  };
  for (std::uint64_t seq = 1; seq <= 500; ++seq) {
    auto ds = rng() % l1.size();
    l1[ds] = leaf(rng());
    std::uint64_t s[1] = {seq};
    t.update_level1(ds, l1[ds], s, filter);
    std::vector<std::uint64_t> got;
    t.propagate(ds, filter, [&](const Node& r, const auto& seqs) {
      last_root = r;
      got = seqs;
    });
    EXPECT_EQ(got, std::vector<std::uint64_t>{seq});
    committed.insert(got.begin(), got.end());
    ASSERT_EQ(last_root, naive_root(l1, 4));
  }
}

TEST(Tree, FailedCommitKeepsSeqsPending) {
  std::vector<Node> l1(20);
  HazelMerkleTree t(l1, 4);
  std::uint64_t s[2] = {9, 4};
  t.update_level1(3, leaf(1), s, {});
  EXPECT_THROW(t.propagate(3, {},
                           [](const Node&, const auto&) {
                             throw Error(ErrorKind::kDeviceCrashed, "x");
                           }),
               Error);
  std::vector<std::uint64_t> got;
  t.propagate(17, {}, [&](const Node&, const auto& v) { got = v; });
  EXPECT_EQ(got, (std::vector<std::uint64_t>{4, 9}));
}

TEST(Tree, LockOrderIsTopDown) {
  std::vector<Node> l1(40);
  HazelMerkleTree t(l1, 4);
  t.enable_lock_trace(true);
  t.propagate(37, {}, [](const Node&, const auto&) {});
  auto tr = t.lock_trace();
  // Each level: parent, then its children in ascending order.
  std::vector<std::uint64_t> want;
  std::uint64_t idx = 37;
  for (std::size_t level = 2; level <= t.levels(); ++level) {
    auto parent = idx / 4;
    want.push_back(t.global_index(level, parent));
    auto first = parent * 4;
    auto n = std::min<std::uint64_t>(4, t.level_size(level - 1) - first);
    for (std::uint64_t c = 0; c < n; ++c) {
      want.push_back(t.global_index(level - 1, first + c));
    }
    idx = parent;
  }
  EXPECT_EQ(tr, want);
}

TEST(Tree, ConcurrentPropagationConverges) {
  for (std::uint32_t b : {2u, 4u, 16u}) {
    const std::size_t n = 333;
    std::vector<Node> init(n);
    HazelMerkleTree t(init, b);
    std::vector<std::mutex> leaf_mu(n);
    std::vector<Node> l1(n);
    std::mutex seen_mu;
    std::set<std::uint64_t> committed;
    std::atomic<std::uint64_t> next_seq{1};
    auto filter = [&](std::vector<std::uint64_t>& v) {
      std::lock_guard lk(seen_mu);
      std::erase_if(v, [&](auto s) { return committed.count(s) > 0; });
    };
    auto commit = [&](const Node&, const std::vector<std::uint64_t>& v) {
      std::lock_guard lk(seen_mu);
      for (auto s : v) EXPECT_TRUE(committed.insert(s).second);
    };
    std::vector<std::thread> th;
    for (int w = 0; w < 4; ++w) {
      th.emplace_back([&, w] {
        std::mt19937_64 rng(w * 101 + b);
        for (int i = 0; i < 2000; ++i) {
          auto ds = rng() % n;
          std::uint64_t seq = next_seq++;
          {
            std::lock_guard lk(leaf_mu[ds]);
            l1[ds] = leaf(rng());
            std::uint64_t s[1] = {seq};
            t.update_level1(ds, l1[ds], s, filter);
          }
          t.propagate(ds, filter, commit);
        }
      });
    }
    for (auto& x : th) x.join();
    auto snap = t.snapshot();
    EXPECT_EQ(snap[0], l1);
    EXPECT_EQ(snap, build_tree(l1, b)) << "branching " << b;
    EXPECT_EQ(committed.size(), next_seq - 1);
  }
}

}  // namespace
}  // namespace snvme
