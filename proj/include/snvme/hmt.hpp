#pragma once

// Hazel Merkle Tree: level 1 holds one node per data set (hash of its IV
// array), upper levels hash groups of `branching` nodes, the top level is a
// single root. Level 0 (per-sector IVs) is never kept in memory.
//
// Nodes carry the set of journal sequence numbers whose effect their hash
// includes but which the persisted root does not cover yet. A root commit
// hands exactly that set to the caller, which keeps the persisted root and
// journal statuses in agreement.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "snvme/crypto.hpp"

namespace snvme {

inline constexpr std::uint32_t kDefaultTreeBranching = 16;

/// Node counts per level, bottom (level 1) first. Always at least two
/// levels so the root is an inner node.
std::vector<std::uint64_t> tree_level_sizes(std::uint64_t level1_nodes,
                                            std::uint32_t branching);

struct TreeSizing {
  std::uint64_t sectors = 0;
  std::uint64_t data_sets = 0;
  std::vector<std::uint64_t> level_nodes;  // level 1 first
  std::uint64_t total_nodes = 0;
  double bytes = 0;  // total_nodes * node_bytes
};

/// In-memory tree size for a device of `capacity_bytes` (4 KiB sectors).
TreeSizing tree_sizing(double capacity_bytes, std::uint32_t data_set_size,
                       std::uint32_t branching, std::uint32_t node_bytes = 16);

/// Every level of the tree over `level1`, level 1 first, root last.
std::vector<std::vector<Node>> build_tree(std::vector<Node> level1,
                                          std::uint32_t branching,
                                          const CipherSuite& suite = kDefaultSuite);

class HazelMerkleTree {
 public:
  /// Removes sequence numbers whose entries no longer await a root commit.
  using PendingFilter = std::function<void(std::vector<std::uint64_t>&)>;
  /// Runs under the root lock with the new root and the sequence numbers it
  /// newly covers.
  using RootCommit =
      std::function<void(const Node& root, const std::vector<std::uint64_t>&)>;

  HazelMerkleTree(std::vector<Node> level1, std::uint32_t branching,
                  const CipherSuite& suite = kDefaultSuite);

  std::uint32_t branching() const { return branching_; }
  /// Number of levels above level 0 (level 1 .. root).
  std::size_t levels() const { return sizes_.size(); }
  std::uint64_t level_size(std::size_t level) const { return sizes_[level - 1]; }
  /// Position in the top-down numbering used for lock ordering (root = 0).
  std::uint64_t global_index(std::size_t level, std::uint64_t i) const {
    return offsets_[level - 1] + i;
  }

  Node level1(std::uint64_t ds) const;
  /// Sets a level-1 node and records the journal entries it now includes.
  void update_level1(std::uint64_t ds, const Node& hash,
                     std::span<const std::uint64_t> seqs,
                     const PendingFilter& filter);
  /// Recomputes levels 2..root above `ds` from current children, committing
  /// the root through `commit`.
  void propagate(std::uint64_t ds, const PendingFilter& filter,
                 const RootCommit& commit);

  Node root() const;
  /// Copy of every level, level 1 first.
  std::vector<std::vector<Node>> snapshot() const;

  /// Lock acquisitions (global indices) by all threads while tracing.
  void enable_lock_trace(bool on);
  std::vector<std::uint64_t> lock_trace() const;

 private:
  struct Slot {
    Node hash{};
    std::vector<std::uint64_t> pending;
  };

  void lock(std::uint64_t g) const;
  void unlock(std::uint64_t g) const;
  Slot& slot(std::size_t level, std::uint64_t i) {
    return nodes_[global_index(level, i)];
  }
  const Slot& slot(std::size_t level, std::uint64_t i) const {
    return nodes_[global_index(level, i)];
  }

  std::uint32_t branching_;
  CipherSuite suite_;
  std::vector<std::uint64_t> sizes_;
  std::vector<std::uint64_t> offsets_;
  std::vector<Slot> nodes_;
  std::unique_ptr<std::atomic<bool>[]> locks_;

  std::atomic<bool> tracing_{false};
  mutable std::mutex trace_mu_;
  mutable std::vector<std::uint64_t> trace_;
};

}  // namespace snvme
