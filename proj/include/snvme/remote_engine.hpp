#pragma once

// Storage-side engine: persists sealed sectors, keeps the freshness tree, the
// IV cache and the NV journal, verifies reads on the fast or full path, and
// recovers after a crash.
//
// Write path (per request): per-sector writer locks (held until the journal
// entry retires), journal slots, exclusive data-set locks, PENDING entries,
// device write with fresh tags, DATA_PERSISTED, cache + level-1 update,
// unlock, then upper-level propagation (hasher pool, or inline with EC off).

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <thread>
#include <unordered_set>
#include <vector>

#include "snvme/blockdev.hpp"
#include "snvme/hmt.hpp"
#include "snvme/iv_cache.hpp"
#include "snvme/layout.hpp"
#include "snvme/nvstore.hpp"

namespace snvme {

enum class RemoteMode {
  kFreshness,  // tree, journal, tag checks
  kStore,      // plain record store (integrity is end-to-end only)
};

struct RemoteConfig {
  RemoteMode mode = RemoteMode::kFreshness;
  bool eventual_consistency = true;
  unsigned hashers = 3;
  std::size_t cache_lines = 1024;
  std::uint32_t tree_branching = kDefaultTreeBranching;
  std::chrono::milliseconds flush_interval{20};
  /// On open, also compare every data sector's IV with the recovered state.
  bool deep_scan = false;
  CipherSuite suite = kDefaultSuite;
};

struct RemoteStats {
  std::uint64_t writes = 0;          // sectors
  std::uint64_t reads = 0;           // sectors
  std::uint64_t fast_hits = 0;
  std::uint64_t full_path = 0;
  std::uint64_t unwritten_reads = 0;
  std::uint64_t freshness_errors = 0;
  std::uint64_t integrity_errors = 0;
  std::uint64_t propagations = 0;
  std::uint64_t root_commits = 0;
  std::uint64_t line_flushes = 0;
  std::uint64_t hasher_backlog = 0;  // queued data sets right now
  std::uint64_t max_hasher_backlog = 0;
  /// Write requests that returned before their root commit.
  std::uint64_t early_acks = 0;
  IvCacheStats cache;
};

struct RecoveryReport {
  std::uint64_t journal_entries = 0;  // live entries found
  std::uint64_t adopted_new = 0;      // PENDING entries whose data landed
  std::uint64_t rolled_back = 0;      // PENDING entries whose data did not
  std::uint64_t data_sets_rewritten = 0;
  std::uint64_t sectors_scanned = 0;  // deep scan only
  Node root{};
};

class RemoteEngine {
 public:
  /// Creates an NV store for the empty tree of a freshly created device.
  static void format(SimDevice& dev, const std::filesystem::path& nv_path,
                     const Key& freshness_key,
                     std::uint32_t tree_branching = kDefaultTreeBranching,
                     std::uint32_t journal_capacity = kDefaultJournalCapacity,
                     const CipherSuite& suite = kDefaultSuite);

  /// Authenticates device state against the NV root (recovering any live
  /// journal entries) and starts the background threads. Throws
  /// Error(kFreshnessViolation) when the disk does not match the root.
  RemoteEngine(SimDevice& dev, const std::filesystem::path& nv_path,
               RemoteConfig cfg = {});
  ~RemoteEngine();
  RemoteEngine(const RemoteEngine&) = delete;
  RemoteEngine& operator=(const RemoteEngine&) = delete;

  /// `records` holds count * 4160 bytes starting at data sector `start`.
  /// Transport fields are ignored and stored as zero; the freshness tag is
  /// replaced. Returns after the data and level 1 are updated.
  void write(std::uint64_t start, ByteSpan records);
  /// Verified records (transport fields zero). Throws SectorError with
  /// kFreshness or kIntegrity naming the first bad sector.
  Bytes read(std::uint64_t start, std::uint32_t count);

  /// Waits until every journal entry has retired and all lines are clean.
  void drain();
  /// Rewrites the freshness tags of written sectors in data sets
  /// [first, first + count) against the current level-1 nodes. Returns the
  /// number of written sectors visited.
  std::uint64_t refresh_tags(std::uint64_t first_ds, std::uint64_t count);

  /// Stops background work without flushing, as a power loss would.
  void halt();

  const DeviceGeometry& geometry() const { return geom_; }
  const RemoteConfig& config() const { return cfg_; }
  const RecoveryReport& recovery_report() const { return report_; }
  RemoteStats stats() const;
  Node root() const;
  Node persisted_root() const;
  std::vector<std::vector<Node>> tree_snapshot() const;
  std::size_t journal_live() const;
  const HazelMerkleTree& tree() const { return *tree_; }

 private:
  class BusyTable {
   public:
    void acquire(std::span<const std::uint64_t> sectors,
                 const std::function<void(std::uint64_t)>& waiting);
    void release(std::uint64_t sector);
    void release_all(std::span<const std::uint64_t> sectors);

   private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::unordered_set<std::uint64_t> busy_;
  };

  struct Group {
    std::uint64_t ds;
    std::uint32_t first;  // index into the request
    std::uint32_t count;
  };

  void recover_state();
  std::shared_ptr<IvLine> load_line(std::uint64_t ds);
  void flush_line(IvLine& line);
  /// Flushes the dirty ones among `lines` with a single journal commit.
  void flush_lines(std::vector<std::shared_ptr<IvLine>> lines);
  void flush_dirty(bool all);
  void request_flush(std::uint64_t ds);
  void enqueue_propagation(std::uint64_t ds);
  void propagate(std::uint64_t ds);
  void hasher_loop(unsigned id);
  void flusher_loop();
  void check_alive() const;
  std::vector<Group> groups_of(std::uint64_t start, std::uint32_t count) const;
  std::vector<std::size_t> stripes_of(const std::vector<Group>& gs) const;
  void verify_sector(std::uint64_t sector, MutableByteSpan record);

  SimDevice& dev_;
  DeviceGeometry geom_;
  RemoteConfig cfg_;
  RecoveryReport report_;

  std::unique_ptr<NvStore> nv_;
  std::unique_ptr<Journal> journal_;
  std::unique_ptr<HazelMerkleTree> tree_;
  std::unique_ptr<IvCache> cache_;
  Key fkey_{};

  static constexpr std::size_t kStripes = 1024;
  std::unique_ptr<std::shared_mutex[]> ds_locks_;
  BusyTable busy_;

  // hashers
  mutable std::mutex hq_mu_;
  std::unique_ptr<std::condition_variable[]> hq_cv_;  // one per hasher
  std::vector<std::deque<std::uint64_t>> hq_;
  std::unordered_set<std::uint64_t> queued_;
  unsigned rr_ = 0;
  unsigned active_hashers_ = 0;
  std::condition_variable idle_cv_;
  Node last_root_{};

  // flusher
  std::mutex fl_mu_;
  std::condition_variable fl_cv_;
  std::set<std::uint64_t> flush_requests_;
  bool flush_all_ = false;

  std::atomic<bool> stopping_{false};
  std::atomic<bool> failed_{false};
  std::vector<std::thread> threads_;

  std::atomic<std::uint64_t> writes_{0}, reads_{0}, fast_{0}, full_{0},
      unwritten_{0}, fresh_err_{0}, integ_err_{0}, props_{0}, commits_{0},
      flushes_{0}, max_backlog_{0}, early_acks_{0};
};

}  // namespace snvme
