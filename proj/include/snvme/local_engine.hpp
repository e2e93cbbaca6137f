#pragma once

// Host-side engine: seals writes under leased counters, attaches network
// counters and MACs, and verifies and opens reads.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "snvme/kbs.hpp"
#include "snvme/kbs_service.hpp"
#include "snvme/remote_service.hpp"
#include "snvme/rpc.hpp"

namespace snvme {

/// Key broker access, over the wire or in process.
class KbsLink {
 public:
  virtual ~KbsLink() = default;
  virtual void register_device(const std::string& device) = 0;
  virtual std::vector<CounterRange> lease(const std::string& device,
                                          const std::string& lessee,
                                          std::uint64_t units) = 0;
  virtual void give_back(const std::string& device, const std::string& lessee,
                         const std::vector<CounterRange>& ranges) = 0;
  virtual Key provision_key(const std::string& tenant,
                            const std::string& device) = 0;
};

class BrokerLink : public KbsLink {
 public:
  BrokerLink(KeyBroker& broker, std::string peer)
      : broker_(broker), auth_{true, std::move(peer)} {}
  void register_device(const std::string& device) override;
  std::vector<CounterRange> lease(const std::string& device,
                                  const std::string& lessee,
                                  std::uint64_t units) override;
  void give_back(const std::string& device, const std::string& lessee,
                 const std::vector<CounterRange>& ranges) override;
  Key provision_key(const std::string& tenant,
                    const std::string& device) override;

 private:
  KeyBroker& broker_;
  AuthContext auth_;
};

class ClientLink : public KbsLink {
 public:
  explicit ClientLink(std::unique_ptr<KbsClient> client)
      : client_(std::move(client)) {}
  void register_device(const std::string& device) override {
    client_->register_device(device);
  }
  std::vector<CounterRange> lease(const std::string& device,
                                  const std::string& lessee,
                                  std::uint64_t units) override {
    return client_->lease(device, lessee, units);
  }
  void give_back(const std::string& device, const std::string& lessee,
                 const std::vector<CounterRange>& ranges) override {
    client_->give_back(device, lessee, ranges);
  }
  Key provision_key(const std::string& tenant,
                    const std::string& device) override {
    return client_->provision_key(tenant, device);
  }

 private:
  std::unique_ptr<KbsClient> client_;
};

/// Leased IV counters for one device. Counter 0 is never issued.
class CounterPool {
 public:
  /// Fetches more ranges; may throw.
  using Refill = std::function<std::vector<CounterRange>()>;

  CounterPool(Refill refill, std::uint64_t watermark);
  ~CounterPool();
  CounterPool(const CounterPool&) = delete;
  CounterPool& operator=(const CounterPool&) = delete;

  void add(const std::vector<CounterRange>& ranges);
  /// `n` counters in issue order, or Error(kCounterExhausted) taking none.
  /// Waits for an in-flight refill, or refills inline, when short.
  std::vector<std::uint64_t> take(std::size_t n);
  std::uint64_t next() { return take(1).front(); }

  std::uint64_t remaining() const;
  std::uint64_t refills() const { return refills_.load(); }
  /// Removes and returns every unissued counter.
  std::vector<CounterRange> release_all();
  /// Blocks until no refill is in flight.
  void wait_refill();

 private:
  void start_refill_locked();
  void refill_body();

  Refill refill_;
  std::uint64_t watermark_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<CounterRange> ranges_;  // issue order; front is current
  std::uint64_t remaining_ = 0;
  bool in_flight_ = false;
  std::thread worker_;
  std::atomic<std::uint64_t> refills_{0};
};

struct LocalConfig {
  std::string device = "dev0";
  std::string tenant = "tenant0";
  std::string lessee = "host0";
  std::uint64_t lease_units = kTerabyteLeaseUnits;
  /// Refill when fewer than this many counters remain; 0 means lease/4.
  std::uint64_t watermark = 0;
  std::uint32_t key_id = 1;
  /// Sectors written under one key before rolling to the next; 0 disables.
  std::uint64_t key_write_budget = 0;
  /// Data sectors on the device; 0 leaves bounds checks to the remote.
  std::uint64_t data_sectors = 0;
  CipherSuite suite = kDefaultSuite;
  /// Unissued counters are kept here across restarts instead of returned.
  std::filesystem::path lease_cache;
  Credentials remote_creds;
  std::string remote_host = "127.0.0.1";
  std::uint16_t remote_port = 0;
  std::string kbs_host = "127.0.0.1";
  std::uint16_t kbs_port = 0;
};

/// Parses the [local] table of a TOML-style file. Unknown keys are errors.
LocalConfig load_local_config(const std::filesystem::path& path);
LocalConfig parse_local_config(const std::string& text);

struct LocalStats {
  std::uint64_t writes = 0;  // sectors
  std::uint64_t reads = 0;
  std::uint64_t unwritten_reads = 0;
  std::uint64_t counters_used = 0;
  std::uint64_t refills = 0;
  std::uint64_t requests = 0;
  std::uint32_t key_id = 0;
};

class LocalEngine {
 public:
  /// Handshakes on `remote`, provisions k_d, and fills the counter pool
  /// (from the lease cache when present).
  LocalEngine(std::unique_ptr<Connection> remote, KbsLink& kbs,
              LocalConfig cfg);
  ~LocalEngine();
  LocalEngine(const LocalEngine&) = delete;
  LocalEngine& operator=(const LocalEngine&) = delete;

  /// `data` holds count * 4096 plaintext bytes.
  void write(std::uint64_t lba, ByteSpan data) {
    write_async(lba, data).get();
  }
  Bytes read(std::uint64_t lba, std::uint32_t count) {
    return read_async(lba, count).get();
  }
  std::future<void> write_async(std::uint64_t lba, ByteSpan data);
  std::future<Bytes> read_async(std::uint64_t lba, std::uint32_t count);
  /// Remote DRAIN.
  void flush();
  /// Remote RECOVER.
  RecoveryReport recover();

  /// Subsequent writes use the next key id.
  void roll_key();
  /// Returns or caches unissued counters and closes the session.
  void shutdown();

  LocalStats stats() const;
  const LocalConfig& config() const { return cfg_; }
  CounterPool& pool() { return *pool_; }

 private:
  const Key& data_key(std::uint32_t key_id);
  void check_range(std::uint64_t lba, std::uint64_t count) const;
  void on_response(Frame& f);
  void save_lease_cache(const std::vector<CounterRange>& ranges);
  std::vector<CounterRange> load_lease_cache();

  LocalConfig cfg_;
  KbsLink& kbs_;
  Key device_key_{};
  std::unique_ptr<CounterPool> pool_;
  SessionKeys keys_;
  ReplayWindow window_;  // reader thread only
  std::uint64_t next_send_ = 0;  // under the RPC send lock
  std::unique_ptr<RpcClient> rpc_;

  std::mutex key_mu_;
  std::map<std::uint32_t, Key> data_keys_;
  std::atomic<std::uint32_t> key_id_;
  std::atomic<std::uint64_t> under_key_{0};

  std::atomic<std::uint64_t> writes_{0}, reads_{0}, unwritten_{0},
      requests_{0};
  bool shut_ = false;
};

}  // namespace snvme
