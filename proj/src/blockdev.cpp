#include "snvme/blockdev.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <thread>

#include "snvme/error.hpp"

namespace snvme {

void SimDevice::create(const std::filesystem::path& path,
                       const DeviceGeometry& geometry) {
  int fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) {
    throw Error(ErrorKind::kDevice, "cannot create " + path.string() + ": " +
                                        std::strerror(errno));
  }
  auto size = static_cast<off_t>(geometry.total_sectors() *
                                 geometry.record_bytes());
  int rc = ::ftruncate(fd, size);
  ::close(fd);
  if (rc != 0) {
    throw Error(ErrorKind::kDevice, "cannot size " + path.string());
  }
}

SimDevice::SimDevice(std::filesystem::path path, DeviceGeometry geometry,
                     DelayModel delay, std::shared_ptr<CrashSwitch> crash)
    : path_(std::move(path)),
      geometry_(geometry),
      crash_(crash ? std::move(crash) : std::make_shared<CrashSwitch>()) {
  fd_ = ::open(path_.c_str(), O_RDWR);
  if (fd_ < 0) {
    throw Error(ErrorKind::kDevice, "cannot open " + path_.string() + ": " +
                                        std::strerror(errno));
  }
  auto expected = geometry_.total_sectors() * geometry_.record_bytes();
  if (std::filesystem::file_size(path_) != expected) {
    ::close(fd_);
    throw Error(ErrorKind::kDevice,
                path_.string() + " does not match the device geometry");
  }
  set_delay(delay);
}

SimDevice::~SimDevice() {
  if (fd_ >= 0) ::close(fd_);
}

void SimDevice::check_range(std::uint64_t start, std::uint64_t count) const {
  if (start > geometry_.total_sectors() ||
      count > geometry_.total_sectors() - start) {
    throw Error(ErrorKind::kOutOfRange, "sector range out of device bounds");
  }
}

void SimDevice::pwrite_all(const std::uint8_t* data, std::size_t len,
                           std::uint64_t off) {
  while (len > 0) {
    auto n = ::pwrite(fd_, data, len, static_cast<off_t>(off));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorKind::kDevice, std::string("pwrite: ") +
                                          std::strerror(errno));
    }
    data += n;
    len -= static_cast<std::size_t>(n);
    off += static_cast<std::uint64_t>(n);
  }
}

void SimDevice::pread_all(std::uint8_t* data, std::size_t len,
                          std::uint64_t off) {
  while (len > 0) {
    auto n = ::pread(fd_, data, len, static_cast<off_t>(off));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorKind::kDevice, std::string("pread: ") +
                                          std::strerror(errno));
    }
    if (n == 0) throw Error(ErrorKind::kDevice, "short read");
    data += n;
    len -= static_cast<std::size_t>(n);
    off += static_cast<std::uint64_t>(n);
  }
}

void SimDevice::set_delay(DelayModel delay) {
  std::lock_guard lk(delay_mu_);
  delay_ = delay;
  channel_free_.assign(std::max(1u, delay.channels),
                       std::chrono::steady_clock::time_point{});
}

void SimDevice::apply_delay(std::uint64_t sectors) {
  std::chrono::steady_clock::time_point finish;
  {
    std::lock_guard lk(delay_mu_);
    if (!delay_.enabled()) return;
    auto now = std::chrono::steady_clock::now();
    auto it = std::min_element(channel_free_.begin(), channel_free_.end());
    auto start = std::max(now, *it);
    *it = start + delay_.per_sector * static_cast<std::int64_t>(sectors);
    finish = *it + delay_.per_command;
  }
  std::this_thread::sleep_until(finish);
}

void SimDevice::record(bool write, std::uint64_t start, std::uint64_t count) {
  if (write) {
    write_cmds_.fetch_add(1, std::memory_order_relaxed);
  } else {
    read_cmds_.fetch_add(1, std::memory_order_relaxed);
  }
  std::lock_guard lk(trace_mu_);
  if (trace_on_) trace_.push_back({write, start, count});
}

void SimDevice::write_sectors(std::uint64_t start, ByteSpan records) {
  const auto rb = geometry_.record_bytes();
  if (records.size() % rb != 0) {
    throw Error(ErrorKind::kInvalidArgument, "partial record in write");
  }
  const std::uint64_t count = records.size() / rb;
  check_range(start, count);
  if (crash_->crashed()) {
    throw Error(ErrorKind::kDeviceCrashed, "device is down");
  }
  apply_delay(count);
  record(true, start, count);
  for (std::uint64_t i = 0; i < count; ++i) {
    {
      std::lock_guard ck(crash_mu_);
      if (crash_->crashed()) {
        throw Error(ErrorKind::kDeviceCrashed, "device lost power");
      }
      if (crash_budget_) {
        if (*crash_budget_ == 0) {
          crash_->trip();
          throw Error(ErrorKind::kDeviceCrashed, "device lost power");
        }
        --*crash_budget_;
      }
      std::unique_lock lk(io_mu_);
      pwrite_all(records.data() + i * rb, rb, (start + i) * rb);
    }
    sector_writes_.fetch_add(1, std::memory_order_relaxed);
  }
}

void SimDevice::read_sectors(std::uint64_t start, std::uint64_t count,
                             MutableByteSpan out) {
  const auto rb = geometry_.record_bytes();
  check_range(start, count);
  if (out.size() != count * rb) {
    throw Error(ErrorKind::kInvalidArgument, "read buffer size mismatch");
  }
  if (crash_->crashed()) {
    throw Error(ErrorKind::kDeviceCrashed, "device is down");
  }
  apply_delay(count);
  record(false, start, count);
  {
    std::shared_lock lk(io_mu_);
    pread_all(out.data(), out.size(), start * rb);
  }
  sector_reads_.fetch_add(count, std::memory_order_relaxed);
}

Bytes SimDevice::read_sectors(std::uint64_t start, std::uint64_t count) {
  Bytes out(count * geometry_.record_bytes());
  read_sectors(start, count, out);
  return out;
}

void SimDevice::flush() {
  if (crash_->crashed()) {
    throw Error(ErrorKind::kDeviceCrashed, "device is down");
  }
}

void SimDevice::schedule_crash(std::uint64_t persisted) {
  std::lock_guard ck(crash_mu_);
  crash_budget_ = persisted;
}

void SimDevice::cancel_crash() {
  std::lock_guard ck(crash_mu_);
  crash_budget_.reset();
}

void SimDevice::reopen() {
  std::lock_guard ck(crash_mu_);
  crash_budget_.reset();
  crash_->reset();
}

SimDevice::SnapshotId SimDevice::snapshot() {
  Bytes image(geometry_.total_sectors() * geometry_.record_bytes());
  {
    std::shared_lock lk(io_mu_);
    pread_all(image.data(), image.size(), 0);
  }
  std::lock_guard lk(snap_mu_);
  auto id = next_snapshot_++;
  snapshots_.emplace(id, std::move(image));
  return id;
}

void SimDevice::restore(SnapshotId id) {
  restore_sectors(id, 0, geometry_.total_sectors(), RecordPart::kBoth);
}

void SimDevice::restore_sectors(SnapshotId id, std::uint64_t start,
                                std::uint64_t count, RecordPart part) {
  check_range(start, count);
  std::lock_guard sl(snap_mu_);
  auto it = snapshots_.find(id);
  if (it == snapshots_.end()) {
    throw Error(ErrorKind::kNotFound, "unknown snapshot");
  }
  const auto rb = geometry_.record_bytes();
  const auto sb = geometry_.sector_bytes();
  std::unique_lock lk(io_mu_);
  for (std::uint64_t s = start; s < start + count; ++s) {
    const std::uint8_t* rec = it->second.data() + s * rb;
    switch (part) {
      case RecordPart::kBoth: pwrite_all(rec, rb, s * rb); break;
      case RecordPart::kData: pwrite_all(rec, sb, s * rb); break;
      case RecordPart::kMetadata:
        pwrite_all(rec + sb, rb - sb, s * rb + sb);
        break;
    }
  }
}

void SimDevice::drop_snapshot(SnapshotId id) {
  std::lock_guard lk(snap_mu_);
  snapshots_.erase(id);
}

void SimDevice::flip_bit(std::uint64_t sector, std::uint32_t byte_in_record,
                         unsigned bit) {
  check_range(sector, 1);
  if (byte_in_record >= geometry_.record_bytes() || bit > 7) {
    throw Error(ErrorKind::kOutOfRange, "bit position outside record");
  }
  std::unique_lock lk(io_mu_);
  std::uint64_t off = sector * geometry_.record_bytes() + byte_in_record;
  std::uint8_t b = 0;
  pread_all(&b, 1, off);
  b ^= static_cast<std::uint8_t>(1u << bit);
  pwrite_all(&b, 1, off);
}

void SimDevice::enable_trace(bool on) {
  std::lock_guard lk(trace_mu_);
  trace_on_ = on;
  if (!on) trace_.clear();
}

std::vector<TraceEntry> SimDevice::trace() const {
  std::lock_guard lk(trace_mu_);
  return trace_;
}

DeviceStats SimDevice::stats() const {
  return {sector_reads_.load(), sector_writes_.load(), read_cmds_.load(),
          write_cmds_.load()};
}

}  // namespace snvme
