#pragma once

// Workload generator and experiment driver. Every run builds a fresh device in
// a scratch directory, prefills it, optionally pollutes freshness tags, then
// issues a seeded op sequence at the configured queue depth.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "snvme/blockdev.hpp"
#include "snvme/remote_engine.hpp"

namespace snvme {

enum class Pattern { kSeqRead, kRandRead, kSeqWrite, kRandWrite, kRandRw };
enum class BenchMode { kBaremetal, kIntegrity, kFreshness };

const char* to_string(Pattern p);
const char* to_string(BenchMode m);
Pattern parse_pattern(const std::string& s);
BenchMode parse_mode(const std::string& s);
/// "4k", "128K", "1m", "512" (bytes). Must be a multiple of 4096.
std::uint32_t parse_block_size(const std::string& s);

struct WorkloadSpec {
  Pattern pattern = Pattern::kRandRead;
  std::uint32_t block_bytes = 4096;
  unsigned qd = 16;       // issuing threads
  unsigned workers = 4;   // sessions the threads are spread over
  std::uint64_t ops = 20000;
  /// When positive, the run stops at whichever of ops / duration comes first.
  double duration_s = 0;
  BenchMode mode = BenchMode::kFreshness;
  bool ec = true;
  double pollution = 0;
  std::uint64_t seed = 1;
  double read_fraction = 0.5;  // kRandRw only

  std::uint64_t device_bytes = 64ull << 20;
  std::uint32_t data_set_size = kDefaultDataSetSize;
  unsigned hashers = 3;
  std::size_t cache_lines = 1024;
  std::chrono::nanoseconds device_delay{0};  // per sector, measured phase only
  unsigned device_channels = 1;
  std::uint64_t lease_units = 1u << 20;
  /// Scratch directory; empty picks one under the system temp dir.
  std::filesystem::path dir;
};

struct Op {
  bool write;
  std::uint64_t lba;  // data sector
  friend bool operator==(const Op&, const Op&) = default;
};

/// The seeded logical op sequence; independent of mode.
std::vector<Op> generate_ops(const WorkloadSpec& spec,
                             std::uint64_t data_sectors);

struct Metrics {
  WorkloadSpec spec;
  std::uint64_t ops = 0;
  std::uint64_t bytes = 0;
  double seconds = 0;
  double throughput_bps = 0;  // bytes per second
  double iops = 0;
  double p50_us = 0, p90_us = 0, p99_us = 0, p999_us = 0;
  std::uint64_t read_sectors = 0;
  std::uint64_t fast_hits = 0;
  std::uint64_t full_path = 0;
  double full_path_rate = 0;   // of verified written-sector reads
  double cache_hit_rate = 0;
  std::uint64_t max_hasher_backlog = 0;
  std::uint64_t early_acks = 0;
  std::uint64_t polluted_data_sets = 0;
};

/// Throws on any verification failure.
Metrics run(const WorkloadSpec& spec);

enum class SweepAxis { kPollution, kQd, kBlockSize, kEc, kMode, kPattern };
SweepAxis parse_axis(const std::string& s);
std::vector<Metrics> sweep(SweepAxis axis, const std::vector<std::string>& values,
                           const WorkloadSpec& base);

void write_csv_header(std::ostream& out);
void write_csv_row(std::ostream& out, const Metrics& m);

}  // namespace snvme
