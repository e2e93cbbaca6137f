// snvme: benchmarks, device tooling, and the key-broker / storage servers.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <pthread.h>
#include <sstream>

#include <CLI11.hpp>

#include "snvme/bench.hpp"
#include "snvme/error.hpp"
#include "snvme/kbs_service.hpp"
#include "snvme/local_engine.hpp"
#include "snvme/remote_service.hpp"

using namespace snvme;

namespace {

Key parse_key(const std::string& hex, const char* what) {
  auto b = from_hex(hex);
  if (b.size() != 32) {
    throw Error(ErrorKind::kConfig, std::string(what) + " must be 64 hex digits");
  }
  Key k;
  std::copy(b.begin(), b.end(), k.begin());
  return k;
}

Key random_key() {
  Key k;
  for (std::size_t i = 0; i < k.size(); i += 8) {
    store_le(MutableByteSpan(k).subspan(i, 8), random_u64(), 8);
  }
  return k;
}

DeviceGeometry geometry_of_file(const std::filesystem::path& p,
                                std::uint32_t ds_size) {
  auto bytes = std::filesystem::file_size(p);
  auto rec = kSectorBytes + kMetadataBytes64;
  if (bytes == 0 || bytes % rec != 0) {
    throw Error(ErrorKind::kGeometry, p.string() + " is not a device image");
  }
  return DeviceGeometry::make(bytes / rec, ds_size);
}

// Blocks until SIGINT or SIGTERM. Call block_signals() before starting threads.
void block_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
}

void wait_for_signal() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  int sig = 0;
  sigwait(&set, &sig);
}

struct BenchArgs {
  std::string pattern = "rand-read";
  std::string bs = "4k";
  std::string mode = "freshness";
  std::string ec = "on";
  double delay_us = 0;
  std::uint64_t device_mib = 64;
  WorkloadSpec spec;
};

void add_bench_options(CLI::App* app, BenchArgs& a) {
  app->add_option("--pattern", a.pattern,
                  "seq-read|rand-read|seq-write|rand-write|rand-rw");
  app->add_option("--bs", a.bs, "block size, 4k..1m");
  app->add_option("--qd", a.spec.qd, "queue depth (issuing threads)");
  app->add_option("--workers", a.spec.workers, "sessions");
  app->add_option("--ops", a.spec.ops, "operations in the measured phase");
  app->add_option("--duration", a.spec.duration_s, "seconds; 0 = op bound");
  app->add_option("--mode", a.mode, "baremetal|integrity|freshness");
  app->add_option("--ec", a.ec, "on|off");
  app->add_option("--pollution", a.spec.pollution, "fraction of data sets");
  app->add_option("--seed", a.spec.seed);
  app->add_option("--read-fraction", a.spec.read_fraction, "rand-rw only");
  app->add_option("--device-mib", a.device_mib, "device size");
  app->add_option("--ds-size", a.spec.data_set_size, "sectors per data set");
  app->add_option("--hashers", a.spec.hashers);
  app->add_option("--cache-lines", a.spec.cache_lines);
  app->add_option("--delay-us", a.delay_us, "device time per sector");
  app->add_option("--channels", a.spec.device_channels);
  app->add_option("--dir", a.spec.dir, "scratch directory");
}

WorkloadSpec finish(BenchArgs& a) {
  auto s = a.spec;
  s.pattern = parse_pattern(a.pattern);
  s.block_bytes = parse_block_size(a.bs);
  s.mode = parse_mode(a.mode);
  if (a.ec != "on" && a.ec != "off") {
    throw Error(ErrorKind::kConfig, "--ec must be on or off");
  }
  s.ec = a.ec == "on";
  s.device_bytes = a.device_mib << 20;
  s.device_delay = std::chrono::nanoseconds(
      static_cast<std::int64_t>(a.delay_us * 1000));
  return s;
}

void emit(const std::string& out, const std::vector<Metrics>& rows) {
  std::ofstream file;
  std::ostream* os = &std::cout;
  if (!out.empty() && out != "-") {
    file.open(out, std::ios::trunc);
    if (!file) throw Error(ErrorKind::kConfig, "cannot write " + out);
    os = &file;
  }
  write_csv_header(*os);
  for (auto& m : rows) write_csv_row(*os, m);
}

void dump_hex(ByteSpan b, std::size_t base) {
  for (std::size_t i = 0; i < b.size(); i += 16) {
    std::printf("%08zx ", base + i);
    for (std::size_t k = 0; k < 16 && i + k < b.size(); ++k) {
      std::printf(" %02x", b[i + k]);
    }
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"snvme: freshness-protected remote block storage"};
  app.require_subcommand(1);

  // bench
  auto* bench = app.add_subcommand("bench", "workload runs")->require_subcommand(1);
  BenchArgs run_args;
  std::string run_out;
  auto* brun = bench->add_subcommand("run", "one run, one CSV row");
  add_bench_options(brun, run_args);
  brun->add_option("--out", run_out, "CSV file (default stdout)");

  BenchArgs sweep_args;
  std::string sweep_out, axis;
  std::vector<std::string> values;
  auto* bsweep = bench->add_subcommand("sweep", "one run per axis value");
  add_bench_options(bsweep, sweep_args);
  bsweep->add_option("--axis", axis, "pollution|qd|bs|ec|mode|pattern")->required();
  bsweep->add_option("--values", values, "comma separated")
      ->required()
      ->delimiter(',');
  bsweep->add_option("--out", sweep_out, "CSV file (default stdout)");

  // mkdev
  std::filesystem::path mk_path, mk_nv;
  std::uint64_t mk_mib = 64;
  std::uint32_t mk_ds = kDefaultDataSetSize, mk_branch = kDefaultTreeBranching,
                mk_journal = kDefaultJournalCapacity;
  std::string mk_fkey;
  auto* mkdev = app.add_subcommand("mkdev", "create a device image and NV store");
  mkdev->add_option("--path", mk_path, "device image")->required();
  mkdev->add_option("--nv", mk_nv, "NV store (omit for a plain device)");
  mkdev->add_option("--mib", mk_mib, "device size");
  mkdev->add_option("--ds-size", mk_ds, "sectors per data set");
  mkdev->add_option("--branching", mk_branch, "tree branching factor");
  mkdev->add_option("--journal", mk_journal, "journal entries");
  mkdev->add_option("--fkey", mk_fkey, "freshness key, 64 hex digits (default random)");

  // dumpdev
  std::filesystem::path dd_path;
  std::uint64_t dd_sector = 0;
  std::uint32_t dd_ds = kDefaultDataSetSize;
  bool dd_physical = false, dd_full = false;
  auto* dumpdev = app.add_subcommand("dumpdev", "hex dump of one sector and its metadata");
  dumpdev->add_option("--path", dd_path)->required();
  dumpdev->add_option("--sector", dd_sector, "data sector (or physical with --physical)");
  dumpdev->add_option("--ds-size", dd_ds);
  dumpdev->add_flag("--physical", dd_physical);
  dumpdev->add_flag("--full", dd_full, "dump all 4096 data bytes");

  // kbs serve
  auto* kbs = app.add_subcommand("kbs", "key broker")->require_subcommand(1);
  std::uint16_t kbs_port = 7300;
  std::filesystem::path kbs_state;
  std::string kbs_psk;
  std::vector<std::string> kbs_tenants, kbs_devices;
  auto* kserve = kbs->add_subcommand("serve", "serve the key broker over TCP");
  kserve->add_option("--port", kbs_port);
  kserve->add_option("--state", kbs_state, "state file (default in memory)");
  kserve->add_option("--psk", kbs_psk, "attestation pre-shared key")->required();
  kserve->add_option("--tenant", kbs_tenants, "NAME=HEXKEY, repeatable");
  kserve->add_option("--device", kbs_devices, "device id to register, repeatable");

  // remote serve
  auto* remote = app.add_subcommand("remote", "storage server")->require_subcommand(1);
  std::uint16_t rs_port = 7400;
  std::string rs_psk, rs_name = "dev0", rs_ec = "on";
  std::filesystem::path rs_path, rs_nv;
  RemoteConfig rs_cfg;
  std::uint32_t rs_ds = kDefaultDataSetSize;
  unsigned rs_workers = 32;
  auto* rserve = remote->add_subcommand("serve", "serve one device over TCP");
  rserve->add_option("--port", rs_port);
  rserve->add_option("--psk", rs_psk)->required();
  rserve->add_option("--name", rs_name, "device id");
  rserve->add_option("--path", rs_path, "device image")->required();
  rserve->add_option("--nv", rs_nv, "NV store (omit for integrity-only)");
  rserve->add_option("--ds-size", rs_ds);
  rserve->add_option("--ec", rs_ec, "on|off");
  rserve->add_option("--hashers", rs_cfg.hashers);
  rserve->add_option("--cache-lines", rs_cfg.cache_lines);
  rserve->add_option("--branching", rs_cfg.tree_branching);
  rserve->add_option("--workers", rs_workers);
  rserve->add_flag("--deep-scan", rs_cfg.deep_scan);

  // recover
  std::filesystem::path rc_path, rc_nv;
  std::uint32_t rc_ds = kDefaultDataSetSize;
  RemoteConfig rc_cfg;
  auto* recover = app.add_subcommand("recover", "replay the journal and verify the device offline");
  recover->add_option("--path", rc_path)->required();
  recover->add_option("--nv", rc_nv)->required();
  recover->add_option("--ds-size", rc_ds);
  recover->add_option("--branching", rc_cfg.tree_branching);
  recover->add_flag("--deep-scan", rc_cfg.deep_scan);

  // io
  std::filesystem::path io_config, io_file;
  std::uint64_t io_lba = 0;
  std::uint32_t io_count = 1;
  std::string io_op;
  auto* io = app.add_subcommand("io", "read or write through a local engine");
  io->add_option("op", io_op, "read|write")->required();
  io->add_option("--config", io_config, "TOML file with a [local] table")->required();
  io->add_option("--lba", io_lba);
  io->add_option("--count", io_count, "sectors (read)");
  io->add_option("--file", io_file, "input (write) or output (read)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (brun->parsed()) {
      emit(run_out, {run(finish(run_args))});
    } else if (bsweep->parsed()) {
      emit(sweep_out, sweep(parse_axis(axis), values, finish(sweep_args)));
    } else if (mkdev->parsed()) {
      auto geom = DeviceGeometry::make((mk_mib << 20) / kSectorBytes, mk_ds);
      SimDevice::create(mk_path, geom);
      if (!mk_nv.empty()) {
        SimDevice dev(mk_path, geom);
        Key k = mk_fkey.empty() ? random_key() : parse_key(mk_fkey, "--fkey");
        RemoteEngine::format(dev, mk_nv, k, mk_branch, mk_journal);
      }
      std::printf("sectors %llu data_sets %llu data_sectors %llu overhead %.6f\n",
                  (unsigned long long)geom.total_sectors(),
                  (unsigned long long)geom.data_set_count(),
                  (unsigned long long)geom.data_sector_count(),
                  geom.metadata_overhead());
    } else if (dumpdev->parsed()) {
      auto geom = geometry_of_file(dd_path, dd_ds);
      SimDevice dev(dd_path, geom);
      auto phys = dd_physical ? dd_sector : geom.data_to_physical(dd_sector);
      auto rec = dev.read_sectors(phys, 1);
      std::printf("physical %llu of %llu (%s)\n", (unsigned long long)phys,
                  (unsigned long long)geom.total_sectors(),
                  phys < geom.data_set_count() ? "aggregated IVs" : "data");
      if (phys >= geom.data_set_count()) {
        auto loc = geom.metadata_location(phys - geom.data_set_count());
        std::printf("data sector %llu, data set %llu slot %u\n",
                    (unsigned long long)(phys - geom.data_set_count()),
                    (unsigned long long)loc.sector, loc.offset);
      }
      std::printf("-- data --\n");
      dump_hex(ByteSpan(rec).first(dd_full ? kSectorBytes : 256), 0);
      if (!dd_full) std::printf("...\n");
      auto md = ByteSpan(rec).subspan(kSectorBytes, kMetadataBytes64);
      std::printf("-- metadata --\n");
      dump_hex(md, kSectorBytes);
      auto m = SectorMetadata64::decode(md);
      std::printf("iv_counter    %llu\nkey_id        %u\naead_tag      %s\n"
                  "freshness_tag %s\nnet_mac       %s\nnet_counter   %llu\n",
                  (unsigned long long)m.iv_counter, m.key_id,
                  to_hex(m.aead_tag).c_str(), to_hex(m.freshness_tag).c_str(),
                  to_hex(m.net_mac).c_str(),
                  (unsigned long long)m.net_counter);
    } else if (kserve->parsed()) {
      block_signals();
      KeyBroker broker(kbs_state);
      for (auto& t : kbs_tenants) {
        auto eq = t.find('=');
        if (eq == std::string::npos) throw Error(ErrorKind::kConfig, "--tenant NAME=HEXKEY");
        broker.register_tenant(t.substr(0, eq), parse_key(t.substr(eq + 1), "tenant key"));
      }
      for (auto& d : kbs_devices) {
        if (!broker.has_device(d)) broker.register_device(d);
      }
      KbsService service(broker);
      RpcServer server(service, {parse_key(kbs_psk, "--psk"), "kbs", ""});
      TcpListener listener(kbs_port);
      std::thread acc([&] { server.serve_listener(listener); });
      std::printf("kbs listening on 127.0.0.1:%u\n", listener.port());
      std::fflush(stdout);
      wait_for_signal();
      listener.close();
      acc.join();
      server.stop();
    } else if (rserve->parsed()) {
      block_signals();
      rs_cfg.eventual_consistency = rs_ec == "on";
      if (rs_nv.empty()) rs_cfg.mode = RemoteMode::kStore;
      auto geom = geometry_of_file(rs_path, rs_ds);
      SimDevice dev(rs_path, geom);
      RemoteService service;
      service.attach(rs_name, std::make_shared<RemoteEngine>(dev, rs_nv, rs_cfg),
                     [&] {
                       dev.reopen();
                       return std::make_shared<RemoteEngine>(dev, rs_nv, rs_cfg);
                     });
      RpcServer server(service, {parse_key(rs_psk, "--psk"), "storage-server", ""},
                       rs_workers);
      TcpListener listener(rs_port);
      std::thread acc([&] { server.serve_listener(listener); });
      std::printf("remote %s listening on 127.0.0.1:%u\n", rs_name.c_str(),
                  listener.port());
      std::fflush(stdout);
      wait_for_signal();
      listener.close();
      acc.join();
      server.stop();
      service.attach(rs_name, nullptr);
    } else if (recover->parsed()) {
      auto geom = geometry_of_file(rc_path, rc_ds);
      SimDevice dev(rc_path, geom);
      RemoteEngine eng(dev, rc_nv, rc_cfg);
      const auto& r = eng.recovery_report();
      std::printf("journal_entries %llu\nadopted_new %llu\nrolled_back %llu\n"
                  "data_sets_rewritten %llu\nsectors_scanned %llu\nroot %s\n",
                  (unsigned long long)r.journal_entries,
                  (unsigned long long)r.adopted_new,
                  (unsigned long long)r.rolled_back,
                  (unsigned long long)r.data_sets_rewritten,
                  (unsigned long long)r.sectors_scanned, to_hex(r.root).c_str());
    } else if (io->parsed()) {
      auto cfg = load_local_config(io_config);
      ClientLink link(std::make_unique<KbsClient>(
          tcp_connect(cfg.kbs_host, cfg.kbs_port),
          Credentials{cfg.remote_creds.psk, cfg.remote_creds.measurement, "kbs"}));
      LocalEngine eng(tcp_connect(cfg.remote_host, cfg.remote_port), link, cfg);
      if (io_op == "write") {
        std::ifstream in(io_file, std::ios::binary);
        Bytes data((std::istreambuf_iterator<char>(in)), {});
        data.resize((data.size() + kSectorBytes - 1) / kSectorBytes * kSectorBytes);
        eng.write(io_lba, data);
        std::printf("wrote %zu sectors at %llu\n", data.size() / kSectorBytes,
                    (unsigned long long)io_lba);
      } else if (io_op == "read") {
        auto data = eng.read(io_lba, io_count);
        std::ofstream out(io_file, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size()));
        std::printf("read %u sectors at %llu\n", io_count,
                    (unsigned long long)io_lba);
      } else {
        throw Error(ErrorKind::kConfig, "io op must be read or write");
      }
      eng.shutdown();
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "snvme: %s\n", e.what());
    return 1;
  }
  return 0;
}
