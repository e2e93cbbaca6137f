#pragma once

// Key broker: tenant key custody, device-key derivation, and per-device
// counter leasing.
//
// Each registered device owns the counter space [0, 2^58). The ledger hands
// out disjoint sub-ranges to lessees (local engines) and folds returned
// ranges back into a compacted free list.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "snvme/crypto.hpp"
#include "snvme/layout.hpp"

namespace snvme {

/// Counter units backing one terabyte of sector writes (one unit per sector).
inline constexpr std::uint64_t kTerabyteLeaseUnits =
    (std::uint64_t{1} << 40) / kSectorBytes;

struct CounterRange {
  std::uint64_t start = 0;
  std::uint64_t end = 0;  // exclusive

  std::uint64_t size() const { return end - start; }
  friend bool operator==(const CounterRange&, const CounterRange&) = default;
};

struct LeaseRange {
  CounterRange range;
  std::string device_id;
  std::string lessee_id;
};

/// Interval bookkeeping for one device. Not thread-safe; the broker
/// serializes access per device.
class CounterLedger {
 public:
  explicit CounterLedger(std::uint64_t space = kIvCounterLimit);

  /// Takes `units` counters from the front of the free list, possibly as
  /// several sub-ranges. Throws Error(kLedger) if fewer are free.
  std::vector<CounterRange> lease(const std::string& lessee,
                                  std::uint64_t units);
  /// Moves `ranges` from `lessee` back to the free list. All ranges must be
  /// outstanding to the lessee; otherwise nothing changes and kLedger is
  /// thrown.
  void give_back(const std::string& lessee,
                 const std::vector<CounterRange>& ranges);

  std::uint64_t space() const { return space_; }
  std::uint64_t free_units() const;
  std::uint64_t outstanding_units() const;
  std::vector<CounterRange> free_ranges() const;
  std::vector<CounterRange> outstanding(const std::string& lessee) const;
  std::vector<std::string> lessees() const;

  /// Verifies: free and outstanding partition [0, space), free list is
  /// compacted, no counter is held by two lessees. Returns an error message
  /// or nullopt.
  std::optional<std::string> check_invariants() const;

  // Serialized form: {"free": [[s,e],...], "outstanding": {lessee: [[s,e]]}}
  std::string to_json() const;
  static CounterLedger from_json(const std::string& json);

 private:
  using IntervalMap = std::map<std::uint64_t, std::uint64_t>;  // start -> end

  static void insert_merged(IntervalMap& m, std::uint64_t start,
                            std::uint64_t end);
  static bool covers(const IntervalMap& m, std::uint64_t start,
                     std::uint64_t end);
  static void carve(IntervalMap& m, std::uint64_t start, std::uint64_t end);

  std::uint64_t space_;
  IntervalMap free_;
  std::map<std::string, IntervalMap> outstanding_;
};

/// Identity established by the transport handshake.
struct AuthContext {
  bool authenticated = false;
  std::string peer;
};

class KeyBroker {
 public:
  /// An empty `state_file` keeps all state in memory.
  explicit KeyBroker(std::filesystem::path state_file = {},
                     std::uint64_t counter_space = kIvCounterLimit);

  void register_tenant(const std::string& tenant_id, const Key& storage_key);
  void register_device(const std::string& device_id);
  bool has_device(const std::string& device_id) const;

  std::vector<LeaseRange> lease_counters(const std::string& device_id,
                                         const std::string& lessee_id,
                                         std::uint64_t units);
  void return_counters(const std::string& device_id,
                       const std::string& lessee_id,
                       const std::vector<CounterRange>& ranges);

  /// HMAC(k_s, device_id). The tenant storage key never leaves the broker.
  Key provision_tenant_keys(const AuthContext& auth,
                            const std::string& tenant_id,
                            const std::string& device_id) const;

  /// Copy of one device ledger for inspection.
  CounterLedger ledger_snapshot(const std::string& device_id) const;

 private:
  struct DeviceEntry {
    mutable std::mutex mu;
    CounterLedger ledger;
    explicit DeviceEntry(std::uint64_t space) : ledger(space) {}
  };

  DeviceEntry& device(const std::string& device_id) const;
  void load();
  void persist() const;

  std::filesystem::path state_file_;
  std::uint64_t counter_space_;
  mutable std::shared_mutex registry_mu_;
  std::map<std::string, Key> tenants_;
  std::map<std::string, std::unique_ptr<DeviceEntry>> devices_;
  mutable std::mutex persist_mu_;
};

}  // namespace snvme
