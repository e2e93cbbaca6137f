#include "snvme/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <thread>
#include <unistd.h>

#include "snvme/error.hpp"
#include "snvme/stack.hpp"

namespace snvme {

const char* to_string(Pattern p) {
  switch (p) {
    case Pattern::kSeqRead: return "seq-read";
    case Pattern::kRandRead: return "rand-read";
    case Pattern::kSeqWrite: return "seq-write";
    case Pattern::kRandWrite: return "rand-write";
    case Pattern::kRandRw: return "rand-rw";
  }
  return "?";
}

const char* to_string(BenchMode m) {
  switch (m) {
    case BenchMode::kBaremetal: return "baremetal";
    case BenchMode::kIntegrity: return "integrity";
    case BenchMode::kFreshness: return "freshness";
  }
  return "?";
}

Pattern parse_pattern(const std::string& s) {
  for (auto p : {Pattern::kSeqRead, Pattern::kRandRead, Pattern::kSeqWrite,
                 Pattern::kRandWrite, Pattern::kRandRw}) {
    if (s == to_string(p)) return p;
  }
  throw Error(ErrorKind::kConfig, "unknown pattern '" + s + "'");
}

BenchMode parse_mode(const std::string& s) {
  for (auto m : {BenchMode::kBaremetal, BenchMode::kIntegrity,
                 BenchMode::kFreshness}) {
    if (s == to_string(m)) return m;
  }
  throw Error(ErrorKind::kConfig, "unknown mode '" + s + "'");
}

std::uint32_t parse_block_size(const std::string& s) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    throw Error(ErrorKind::kConfig, "bad block size '" + s + "'");
  }
  std::string suffix = s.substr(pos);
  if (suffix == "k" || suffix == "K") v <<= 10;
  else if (suffix == "m" || suffix == "M") v <<= 20;
  else if (!suffix.empty()) throw Error(ErrorKind::kConfig, "bad block size '" + s + "'");
  if (v == 0 || v % kSectorBytes != 0 || v > (1u << 20)) {
    throw Error(ErrorKind::kConfig,
                "block size must be a multiple of 4 KiB up to 1 MiB");
  }
  return static_cast<std::uint32_t>(v);
}

SweepAxis parse_axis(const std::string& s) {
  if (s == "pollution") return SweepAxis::kPollution;
  if (s == "qd") return SweepAxis::kQd;
  if (s == "bs") return SweepAxis::kBlockSize;
  if (s == "ec") return SweepAxis::kEc;
  if (s == "mode") return SweepAxis::kMode;
  if (s == "pattern") return SweepAxis::kPattern;
  throw Error(ErrorKind::kConfig, "unknown sweep axis '" + s + "'");
}

namespace {

class ScratchDir {
 public:
  explicit ScratchDir(std::filesystem::path p) {
    if (p.empty()) {
      static std::atomic<int> seq{0};
      p = std::filesystem::temp_directory_path() /
          ("snvme-bench-" + std::to_string(::getpid()) + "-" +
           std::to_string(seq++));
      owned_ = true;
    }
    path_ = std::move(p);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    if (owned_) std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  bool owned_ = false;
};

double percentile(std::vector<double>& v, double q) {
  if (v.empty()) return 0;
  auto k = static_cast<std::size_t>(std::ceil(q * v.size())) - 1;
  k = std::min(k, v.size() - 1);
  std::nth_element(v.begin(), v.begin() + k, v.end());
  return v[k];
}

// Issues the op list from `qd` threads; `io(thread, op)` performs one op.
template <class Io>
std::pair<double, std::vector<double>> drive(const WorkloadSpec& spec,
                                             const std::vector<Op>& ops,
                                             Io&& io) {
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex err_mu;
  std::vector<std::vector<double>> lat(spec.qd);
  const auto t0 = std::chrono::steady_clock::now();
  const auto deadline =
      spec.duration_s > 0
          ? t0 + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                     std::chrono::duration<double>(spec.duration_s))
          : std::chrono::steady_clock::time_point::max();
  std::vector<std::thread> ts;
  for (unsigned t = 0; t < spec.qd; ++t) {
    ts.emplace_back([&, t] {
      lat[t].reserve(ops.size() / spec.qd + 1);
      while (!failed) {
        auto i = next.fetch_add(1);
        if (i >= ops.size()) break;
        auto a = std::chrono::steady_clock::now();
        if (a > deadline) break;
        try {
          io(t, ops[i]);
        } catch (...) {
          std::lock_guard lk(err_mu);
          if (!error) error = std::current_exception();
          failed = true;
          break;
        }
        auto b = std::chrono::steady_clock::now();
        lat[t].push_back(std::chrono::duration<double, std::micro>(b - a).count());
      }
    });
  }
  for (auto& t : ts) t.join();
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (error) std::rethrow_exception(error);
  std::vector<double> all;
  for (auto& v : lat) all.insert(all.end(), v.begin(), v.end());
  return {secs, std::move(all)};
}

void fill_metrics(Metrics& m, double secs, std::vector<double> lat) {
  m.ops = lat.size();
  m.bytes = m.ops * m.spec.block_bytes;
  m.seconds = secs;
  m.throughput_bps = secs > 0 ? m.bytes / secs : 0;
  m.iops = secs > 0 ? m.ops / secs : 0;
  m.p50_us = percentile(lat, 0.50);
  m.p90_us = percentile(lat, 0.90);
  m.p99_us = percentile(lat, 0.99);
  m.p999_us = percentile(lat, 0.999);
}

Metrics run_baremetal(const WorkloadSpec& spec, const ScratchDir& dir) {
  auto geom = DeviceGeometry::make(spec.device_bytes / kSectorBytes,
                                   spec.data_set_size);
  const auto path = dir.path() / "baremetal.img";
  SimDevice::create(path, geom);
  SimDevice dev(path, geom);
  const auto rb = geom.record_bytes();
  const std::uint32_t blocks = spec.block_bytes / kSectorBytes;
  Bytes fill(std::size_t{256} * rb, 0x5c);
  for (std::uint64_t s = 0; s < geom.data_sector_count(); s += 256) {
    auto n = std::min<std::uint64_t>(256, geom.data_sector_count() - s);
    dev.write_sectors(geom.data_to_physical(s), ByteSpan(fill).first(n * rb));
  }
  auto ops = generate_ops(spec, geom.data_sector_count());
  dev.set_delay({spec.device_delay, {}, spec.device_channels});
  Bytes payload(std::size_t{blocks} * rb, 0x3a);
  auto [secs, lat] = drive(spec, ops, [&](unsigned, const Op& op) {
    if (op.write) {
      dev.write_sectors(geom.data_to_physical(op.lba), payload);
    } else {
      dev.read_sectors(geom.data_to_physical(op.lba), blocks);
    }
  });
  Metrics m;
  m.spec = spec;
  fill_metrics(m, secs, std::move(lat));
  return m;
}

Metrics run_stack(const WorkloadSpec& spec, const ScratchDir& dir) {
  StackOptions o;
  o.dir = dir.path();
  o.total_sectors = spec.device_bytes / kSectorBytes;
  o.data_set_size = spec.data_set_size;
  o.remote.mode = spec.mode == BenchMode::kFreshness ? RemoteMode::kFreshness
                                                     : RemoteMode::kStore;
  o.remote.eventual_consistency = spec.ec;
  o.remote.hashers = spec.hashers;
  o.remote.cache_lines = spec.cache_lines;
  o.local.lease_units = spec.lease_units;
  o.sessions = std::max(1u, spec.workers);
  o.server_workers = spec.qd + 4;
  Stack st(o);
  auto remote = st.remote();
  const auto& geom = st.device().geometry();
  const auto N = geom.data_sector_count();
  const bool fresh = spec.mode == BenchMode::kFreshness;

  // Prefill every data sector so reads exercise verification.
  {
    constexpr std::uint64_t kChunk = 64;
    std::atomic<std::uint64_t> cursor{0};
    std::vector<std::thread> ts;
    for (unsigned t = 0; t < st.sessions(); ++t) {
      ts.emplace_back([&, t] {
        Bytes data(kChunk * kSectorBytes, static_cast<std::uint8_t>(t + 1));
        for (;;) {
          auto s = cursor.fetch_add(kChunk);
          if (s >= N) break;
          auto n = std::min(kChunk, N - s);
          st.local(t).write(s, ByteSpan(data).first(n * kSectorBytes));
        }
      });
    }
    for (auto& t : ts) t.join();
  }
  Metrics m;
  m.spec = spec;
  if (fresh) {
    remote->drain();
    remote->refresh_tags(0, geom.data_set_count());
    if (spec.pollution > 0) {
      const auto D = geom.data_set_count();
      std::vector<std::uint64_t> order(D);
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(spec.seed ^ 0x706f6c6cull);
      std::shuffle(order.begin(), order.end(), rng);
      const auto k = static_cast<std::uint64_t>(
          std::llround(std::clamp(spec.pollution, 0.0, 1.0) * D));
      Bytes one(kSectorBytes, 0xee);
      for (std::uint64_t i = 0; i < k; ++i) {
        st.local().write(geom.first_sector_of(order[i]), one);
      }
      m.polluted_data_sets = k;
    }
    remote->drain();
  }

  auto ops = generate_ops(spec, N);
  const std::uint32_t blocks = spec.block_bytes / kSectorBytes;
  std::vector<Bytes> payloads(spec.qd);
  for (unsigned t = 0; t < spec.qd; ++t) {
    std::mt19937_64 rng(spec.seed * 1000003 + t);
    payloads[t].resize(spec.block_bytes);
    for (auto& b : payloads[t]) b = static_cast<std::uint8_t>(rng());
  }
  const auto before = remote->stats();
  st.device().set_delay({spec.device_delay, {}, spec.device_channels});
  auto [secs, lat] = drive(spec, ops, [&](unsigned t, const Op& op) {
    auto& local = st.local(t % st.sessions());
    if (op.write) {
      local.write(op.lba, payloads[t]);
    } else {
      local.read(op.lba, blocks);
    }
  });
  st.device().set_delay({});
  const auto after = remote->stats();
  fill_metrics(m, secs, std::move(lat));
  m.read_sectors = after.reads - before.reads;
  m.fast_hits = after.fast_hits - before.fast_hits;
  m.full_path = after.full_path - before.full_path;
  const auto verified = m.fast_hits + m.full_path;
  m.full_path_rate = verified ? double(m.full_path) / verified : 0;
  const auto hits = after.cache.hits - before.cache.hits;
  const auto look = hits + after.cache.misses - before.cache.misses;
  m.cache_hit_rate = look ? double(hits) / look : 0;
  m.max_hasher_backlog = after.max_hasher_backlog;
  m.early_acks = after.early_acks - before.early_acks;
  if (fresh) remote->drain();
  return m;
}

}  // namespace

std::vector<Op> generate_ops(const WorkloadSpec& spec,
                             std::uint64_t data_sectors) {
  const std::uint64_t blocks = spec.block_bytes / kSectorBytes;
  if (blocks == 0 || blocks > data_sectors) {
    throw Error(ErrorKind::kConfig, "block size exceeds the device");
  }
  const std::uint64_t slots = data_sectors / blocks;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> coin(0, 1);
  std::vector<Op> ops(spec.ops);
  std::uint64_t cursor = 0;
  for (auto& op : ops) {
    switch (spec.pattern) {
      case Pattern::kSeqRead:
      case Pattern::kSeqWrite:
        op.lba = cursor * blocks;
        cursor = (cursor + 1) % slots;
        op.write = spec.pattern == Pattern::kSeqWrite;
        break;
      case Pattern::kRandRead:
      case Pattern::kRandWrite:
        op.lba = (rng() % slots) * blocks;
        op.write = spec.pattern == Pattern::kRandWrite;
        break;
      case Pattern::kRandRw:
        op.lba = (rng() % slots) * blocks;
        op.write = coin(rng) >= spec.read_fraction;
        break;
    }
  }
  return ops;
}

Metrics run(const WorkloadSpec& spec) {
  if (spec.qd == 0) throw Error(ErrorKind::kConfig, "qd must be positive");
  if (spec.pollution < 0 || spec.pollution > 1) {
    throw Error(ErrorKind::kConfig, "pollution must be in [0, 1]");
  }
  ScratchDir dir(spec.dir);
  if (spec.mode == BenchMode::kBaremetal) return run_baremetal(spec, dir);
  return run_stack(spec, dir);
}

std::vector<Metrics> sweep(SweepAxis axis, const std::vector<std::string>& values,
                           const WorkloadSpec& base) {
  std::vector<Metrics> out;
  for (const auto& v : values) {
    auto s = base;
    switch (axis) {
      case SweepAxis::kPollution: s.pollution = std::stod(v); break;
      case SweepAxis::kQd: s.qd = static_cast<unsigned>(std::stoul(v)); break;
      case SweepAxis::kBlockSize: s.block_bytes = parse_block_size(v); break;
      case SweepAxis::kEc:
        if (v != "on" && v != "off") {
          throw Error(ErrorKind::kConfig, "ec must be on or off");
        }
        s.ec = v == "on";
        break;
      case SweepAxis::kMode: s.mode = parse_mode(v); break;
      case SweepAxis::kPattern: s.pattern = parse_pattern(v); break;
    }
    out.push_back(run(s));
  }
  return out;
}

void write_csv_header(std::ostream& out) {
  out << "pattern,bs,qd,workers,mode,ec,pollution,seed,ops,seconds,"
         "throughput_Bps,iops,lat_p50_us,lat_p90_us,lat_p99_us,lat_p999_us,"
         "read_sectors,fast_hits,full_path,full_path_rate,cache_hit_rate,"
         "max_hasher_backlog,early_acks,polluted_data_sets\n";
}

void write_csv_row(std::ostream& out, const Metrics& m) {
  const auto& s = m.spec;
  auto f = out.flags();
  out << to_string(s.pattern) << ',' << s.block_bytes << ',' << s.qd << ','
      << s.workers << ',' << to_string(s.mode) << ',' << (s.ec ? "on" : "off")
      << ',' << s.pollution << ',' << s.seed << ',' << m.ops << ','
      << std::fixed << std::setprecision(6) << m.seconds << ','
      << std::setprecision(1) << m.throughput_bps << ',' << m.iops << ','
      << m.p50_us << ',' << m.p90_us << ',' << m.p99_us << ',' << m.p999_us
      << ',' << m.read_sectors << ',' << m.fast_hits << ',' << m.full_path
      << ',' << std::setprecision(4) << m.full_path_rate << ','
      << m.cache_hit_rate << ',' << m.max_hasher_backlog << ','
      << m.early_acks << ',' << m.polluted_data_sets << '\n';
  out.flags(f);
}

}  // namespace snvme
