#pragma once

// Crash-protected NV region of the remote: persisted root, freshness key and
// the write journal. Every commit replaces the whole image atomically, so a
// simulated power loss leaves either the old or the new image.
//
// The file holds two image slots of equal size. Commit n goes to slot n % 2,
// never the slot holding the current image; opening picks the valid slot
// with the higher commit sequence. An all-zero slot is empty.
//
// Image layout (little-endian), see docs/formats.md:
//   0..7   magic "sNVMeNV1"     8..15  commit sequence
//   16..31 root                 32..63 freshness key
//   64..67 journal capacity     68..71 reserved (0)
//   72..   capacity * 32-byte entries
//   last 32 bytes: BLAKE3 of everything before

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "snvme/blockdev.hpp"
#include "snvme/bytes.hpp"
#include "snvme/crypto.hpp"

namespace snvme {

inline constexpr std::uint32_t kDefaultJournalCapacity = 512;
inline constexpr std::size_t kJournalEntryBytes = 32;

enum class JournalStatus : std::uint8_t {
  kRetired = 0,
  kPending = 1,
  kDataPersisted = 2,
  kTreeUpdated = 3,
};

const char* to_string(JournalStatus s) noexcept;

inline constexpr std::uint8_t kEntryFlushed = 1;

/// 32 bytes: 0..7 sector, 8..15 old iv, 16..23 new iv, 24..27 key id,
/// 28 status, 29 flags, 30..31 reserved.
struct JournalEntry {
  std::uint64_t sector = 0;
  std::uint64_t old_iv = 0;
  std::uint64_t new_iv = 0;
  std::uint32_t key_id = 0;
  JournalStatus status = JournalStatus::kRetired;
  std::uint8_t flags = 0;

  bool flushed() const { return (flags & kEntryFlushed) != 0; }
  ByteArray<kJournalEntryBytes> encode() const;
  static JournalEntry decode(ByteSpan in);

  friend bool operator==(const JournalEntry&, const JournalEntry&) = default;
};

struct NvImage {
  std::uint64_t commit_seq = 0;
  Node root{};
  Key freshness_key{};
  std::vector<JournalEntry> entries;  // one per slot

  Bytes encode() const;
  /// Throws Error(kFreshnessViolation) on a bad magic or checksum.
  static NvImage decode(ByteSpan in);
  /// Encoded size of an image with `capacity` journal slots.
  static std::size_t encoded_size(std::uint32_t capacity);
};

class NvStore {
 public:
  static void create(const std::filesystem::path& path, const Key& freshness_key,
                     const Node& root,
                     std::uint32_t capacity = kDefaultJournalCapacity);

  NvStore(std::filesystem::path path, std::shared_ptr<CrashSwitch> crash);
  ~NvStore();
  NvStore(const NvStore&) = delete;
  NvStore& operator=(const NvStore&) = delete;

  /// Copy of the current image.
  NvImage image() const;
  const Key& freshness_key() const { return freshness_key_; }
  std::uint32_t capacity() const { return capacity_; }

  /// Edits a copy of the image and persists it. Throws Error(kDeviceCrashed)
  /// without any effect once the crash switch is tripped.
  void commit(const std::function<void(NvImage&)>& edit);

  /// Power loss at the start of the `n`-th further commit (0 = the next).
  void schedule_crash(std::uint64_t n);
  void cancel_crash();
  std::uint64_t commits() const;

 private:
  std::filesystem::path path_;
  std::shared_ptr<CrashSwitch> crash_;
  int fd_ = -1;
  mutable std::mutex mu_;
  NvImage image_;
  Key freshness_key_{};
  std::uint32_t capacity_ = 0;
  std::uint64_t commits_ = 0;
  std::optional<std::uint64_t> crash_budget_;
};

/// In-memory mirror of the journal slots with sequence numbers, slot
/// reservation, and the status transitions. Each transition is one NV commit.
class Journal {
 public:
  /// Called with the sector of every entry that reaches RETIRED.
  using RetireHook = std::function<void(std::uint64_t sector)>;

  Journal(NvStore& nv, RetireHook on_retire);

  std::uint32_t capacity() const { return nv_.capacity(); }
  std::uint32_t in_use() const;

  /// Blocks until `n` slots are free. `starved` runs (without the journal
  /// lock) whenever the caller has to wait. Throws kJournalFull if n exceeds
  /// the capacity.
  std::vector<std::uint32_t> reserve(std::size_t n,
                                     const std::function<void()>& starved);
  /// Gives back reserved slots that were never used.
  void release(std::span<const std::uint32_t> slots);

  /// Writes PENDING entries into reserved slots; returns their sequence ids.
  std::vector<std::uint64_t> begin(std::span<const std::uint32_t> slots,
                                   std::span<const JournalEntry> entries);
  void mark_persisted(std::span<const std::uint64_t> seqs);
  /// Persists `root` and marks `seqs` TREE_UPDATED in one commit; entries
  /// already flushed retire in the same commit.
  void commit_root(const Node& root, std::span<const std::uint64_t> seqs);
  /// Records that the aggregated sectors now hold these entries' new IVs.
  /// Flushed TREE_UPDATED entries retire.
  void mark_flushed(std::span<const std::uint64_t> seqs);
  /// Drops sequence ids whose root commit already happened.
  void filter_uncommitted(std::vector<std::uint64_t>& seqs) const;

  /// Number of live (non-retired) entries.
  std::size_t live() const;
  /// Waits until `live() == 0` or `timeout` passes.
  bool wait_empty(std::chrono::milliseconds timeout);

 private:
  struct Slot {
    std::uint64_t seq = 0;  // 0 = free
    bool reserved = false;
    JournalEntry e;
  };
  std::optional<std::uint32_t> slot_of(std::uint64_t seq) const;
  void retire_done(NvImage& img, std::vector<std::uint64_t>& retired_sectors,
                   std::span<const std::uint32_t> touched);

  NvStore& nv_;
  RetireHook on_retire_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<Slot> slots_;
  std::unordered_map<std::uint64_t, std::uint32_t> by_seq_;
  std::uint32_t used_ = 0;  // reserved or live
  std::uint64_t next_seq_ = 1;
};

}  // namespace snvme
