#pragma once

// File-backed simulated NVMe namespace with extended LBAs.
//
// The backing file holds B records of (sector_bytes + metadata_bytes) with the
// metadata inline after each sector. Every record is persisted atomically;
// multi-sector writes persist record by record in submission order. A crash
// can be scheduled after the N-th persisted record; from then on all I/O
// fails with kDeviceCrashed until reopen().

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <vector>

#include "snvme/bytes.hpp"
#include "snvme/layout.hpp"

namespace snvme {

/// Shared between a device and the NV store so that a simulated power loss
/// freezes both at the same instant.
class CrashSwitch {
 public:
  bool crashed() const { return crashed_.load(std::memory_order_acquire); }
  void trip() { crashed_.store(true, std::memory_order_release); }
  void reset() { crashed_.store(false, std::memory_order_release); }

 private:
  std::atomic<bool> crashed_{false};
};

/// Service-time model. Each sector transfer occupies one of `channels` for
/// `per_sector`; every command additionally waits `per_command`.
struct DelayModel {
  std::chrono::nanoseconds per_sector{0};
  std::chrono::nanoseconds per_command{0};
  unsigned channels = 1;

  bool enabled() const {
    return per_sector.count() > 0 || per_command.count() > 0;
  }
};

enum class RecordPart { kData, kMetadata, kBoth };

struct DeviceStats {
  std::uint64_t sector_reads = 0;
  std::uint64_t sector_writes = 0;
  std::uint64_t read_commands = 0;
  std::uint64_t write_commands = 0;
};

struct TraceEntry {
  bool write;
  std::uint64_t start;
  std::uint64_t count;
};

class SimDevice {
 public:
  using SnapshotId = std::uint64_t;

  /// Creates (or truncates) a zero-filled backing file.
  static void create(const std::filesystem::path& path,
                     const DeviceGeometry& geometry);

  SimDevice(std::filesystem::path path, DeviceGeometry geometry,
            DelayModel delay = {},
            std::shared_ptr<CrashSwitch> crash = nullptr);
  ~SimDevice();

  SimDevice(const SimDevice&) = delete;
  SimDevice& operator=(const SimDevice&) = delete;

  const DeviceGeometry& geometry() const { return geometry_; }
  const std::filesystem::path& path() const { return path_; }
  std::shared_ptr<CrashSwitch> crash_switch() const { return crash_; }

  /// `records` holds whole extended LBAs, count = records.size() / record_bytes.
  void write_sectors(std::uint64_t start, ByteSpan records);
  void read_sectors(std::uint64_t start, std::uint64_t count,
                    MutableByteSpan out);
  Bytes read_sectors(std::uint64_t start, std::uint64_t count);
  void flush();

  /// Power loss after `persisted` more record writes.
  void schedule_crash(std::uint64_t persisted);
  void cancel_crash();
  bool crashed() const { return crash_->crashed(); }
  /// Clears the crash state; persisted content is what survived.
  void reopen();

  SnapshotId snapshot();
  void restore(SnapshotId id);
  /// Restores part of [start, start + count) from a snapshot.
  void restore_sectors(SnapshotId id, std::uint64_t start, std::uint64_t count,
                       RecordPart part = RecordPart::kBoth);
  void drop_snapshot(SnapshotId id);

  /// Flips one bit in place, bypassing the crash model (tamper harness).
  void flip_bit(std::uint64_t sector, std::uint32_t byte_in_record,
                unsigned bit);

  void set_delay(DelayModel delay);
  void enable_trace(bool on);
  std::vector<TraceEntry> trace() const;
  DeviceStats stats() const;

 private:
  void check_range(std::uint64_t start, std::uint64_t count) const;
  void apply_delay(std::uint64_t sectors);
  void pwrite_all(const std::uint8_t* data, std::size_t len, std::uint64_t off);
  void pread_all(std::uint8_t* data, std::size_t len, std::uint64_t off);
  void record(bool write, std::uint64_t start, std::uint64_t count);

  std::filesystem::path path_;
  DeviceGeometry geometry_;
  int fd_ = -1;
  std::shared_ptr<CrashSwitch> crash_;

  mutable std::shared_mutex io_mu_;
  std::mutex crash_mu_;
  std::optional<std::uint64_t> crash_budget_;

  std::mutex delay_mu_;
  DelayModel delay_;
  std::vector<std::chrono::steady_clock::time_point> channel_free_;

  std::mutex snap_mu_;
  std::map<SnapshotId, Bytes> snapshots_;
  SnapshotId next_snapshot_ = 1;

  mutable std::mutex trace_mu_;
  bool trace_on_ = false;
  std::vector<TraceEntry> trace_;

  std::atomic<std::uint64_t> sector_reads_{0};
  std::atomic<std::uint64_t> sector_writes_{0};
  std::atomic<std::uint64_t> read_cmds_{0};
  std::atomic<std::uint64_t> write_cmds_{0};
};

}  // namespace snvme
