#pragma once

// Write-back LRU cache of aggregated-IV metadata sectors, one line per data
// set. A hash map gives O(1) lookup, a list keeps recency; the structure lock
// is held only for lookup and list surgery, each line has its own lock.

#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <unordered_map>
#include <vector>

#include "snvme/crypto.hpp"

namespace snvme {

struct IvLine {
  IvLine(std::uint64_t data_set, std::vector<std::uint64_t> iv_array,
         const Node& h)
      : ds(data_set), ivs(std::move(iv_array)), hash(h) {}

  const std::uint64_t ds;
  std::mutex mu;  // guards every field below
  std::vector<std::uint64_t> ivs;
  Node hash;  // node_hash(ivs)
  bool dirty = false;
  std::vector<std::uint64_t> unflushed;  // journal seqs applied since last flush
  /// Serializes write-backs of this line so they reach the disk in order.
  std::mutex flush_mu;
};

struct IvCacheStats {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t evictions = 0;
  std::uint64_t writebacks = 0;
};

class IvCache {
 public:
  /// Builds a verified line for a data set; may throw.
  using Loader = std::function<std::shared_ptr<IvLine>(std::uint64_t ds)>;
  /// Persists a dirty line.
  using Writeback = std::function<void(IvLine&)>;

  IvCache(std::size_t capacity, Loader loader, Writeback writeback);

  /// Returns the line, loading it on a miss. Lines held by callers are never
  /// evicted.
  std::shared_ptr<IvLine> get(std::uint64_t ds);
  /// Cached line or nullptr, without touching recency or loading.
  std::shared_ptr<IvLine> peek(std::uint64_t ds) const;
  std::vector<std::shared_ptr<IvLine>> lines() const;

  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  IvCacheStats stats() const;

 private:
  using Lru = std::list<std::shared_ptr<IvLine>>;
  void evict_locked();

  std::size_t capacity_;
  Loader loader_;
  Writeback writeback_;
  mutable std::mutex mu_;
  Lru lru_;  // most recent first
  std::unordered_map<std::uint64_t, Lru::iterator> map_;
  IvCacheStats stats_;
};

}  // namespace snvme
