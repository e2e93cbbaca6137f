#include "snvme/kbs.hpp"

#include <fstream>
#include <json.hpp>

#include "snvme/error.hpp"

namespace snvme {

using json = nlohmann::json;

CounterLedger::CounterLedger(std::uint64_t space) : space_(space) {
  if (space_ == 0) throw Error(ErrorKind::kInvalidArgument, "empty space");
  free_.emplace(0, space_);
}

void CounterLedger::insert_merged(IntervalMap& m, std::uint64_t start,
                                  std::uint64_t end) {
  auto next = m.lower_bound(start);
  if (next != m.begin()) {
    auto prev = std::prev(next);
    if (prev->second == start) {
      start = prev->first;
      m.erase(prev);
    }
  }
  if (next != m.end() && next->first == end) {
    end = next->second;
    m.erase(next);
  }
  m.emplace(start, end);
}

bool CounterLedger::covers(const IntervalMap& m, std::uint64_t start,
                           std::uint64_t end) {
  auto it = m.upper_bound(start);
  if (it == m.begin()) return false;
  --it;
  return it->first <= start && end <= it->second;
}

void CounterLedger::carve(IntervalMap& m, std::uint64_t start,
                          std::uint64_t end) {
  auto it = std::prev(m.upper_bound(start));
  auto [s, e] = *it;
  m.erase(it);
  if (s < start) m.emplace(s, start);
  if (end < e) m.emplace(end, e);
}

std::vector<CounterRange> CounterLedger::lease(const std::string& lessee,
                                               std::uint64_t units) {
  if (units > free_units()) {
    throw Error(ErrorKind::kLedger, "counter ledger exhausted");
  }
  std::vector<CounterRange> out;
  auto& held = outstanding_[lessee];
  while (units > 0) {
    auto it = free_.begin();
    std::uint64_t take = std::min(units, it->second - it->first);
    CounterRange r{it->first, it->first + take};
    if (take == it->second - it->first) {
      free_.erase(it);
    } else {
      auto end = it->second;
      free_.erase(it);
      free_.emplace(r.end, end);
    }
    insert_merged(held, r.start, r.end);
    out.push_back(r);
    units -= take;
  }
  if (held.empty()) outstanding_.erase(lessee);
  return out;
}

void CounterLedger::give_back(const std::string& lessee,
                              const std::vector<CounterRange>& ranges) {
  auto it = outstanding_.find(lessee);
  if (it == outstanding_.end()) {
    if (ranges.empty()) return;
    throw Error(ErrorKind::kLedger, "lessee holds no counters");
  }
  // Validate on a copy so a rejected call changes nothing.
  IntervalMap held = it->second;
  for (const auto& r : ranges) {
    if (r.start >= r.end || !covers(held, r.start, r.end)) {
      throw Error(ErrorKind::kLedger, "range [" + std::to_string(r.start) +
                                          ", " + std::to_string(r.end) +
                                          ") not owned by " + lessee);
    }
    carve(held, r.start, r.end);
  }
  for (const auto& r : ranges) insert_merged(free_, r.start, r.end);
  if (held.empty()) {
    outstanding_.erase(it);
  } else {
    it->second = std::move(held);
  }
}

std::uint64_t CounterLedger::free_units() const {
  std::uint64_t n = 0;
  for (auto& [s, e] : free_) n += e - s;
  return n;
}

std::uint64_t CounterLedger::outstanding_units() const {
  std::uint64_t n = 0;
  for (auto& [lessee, m] : outstanding_) {
    for (auto& [s, e] : m) n += e - s;
  }
  return n;
}

std::vector<CounterRange> CounterLedger::free_ranges() const {
  std::vector<CounterRange> out;
  for (auto& [s, e] : free_) out.push_back({s, e});
  return out;
}

std::vector<CounterRange> CounterLedger::outstanding(
    const std::string& lessee) const {
  std::vector<CounterRange> out;
  auto it = outstanding_.find(lessee);
  if (it == outstanding_.end()) return out;
  for (auto& [s, e] : it->second) out.push_back({s, e});
  return out;
}

std::vector<std::string> CounterLedger::lessees() const {
  std::vector<std::string> out;
  for (auto& [l, m] : outstanding_) out.push_back(l);
  return out;
}

std::optional<std::string> CounterLedger::check_invariants() const {
  std::map<std::uint64_t, std::uint64_t> all;
  std::uint64_t prev_end = 0;
  bool first = true;
  for (auto& [s, e] : free_) {
    if (s >= e) return "empty free interval";
    if (!first && s <= prev_end) {
      return s == prev_end ? "free list not compacted" : "free list overlaps";
    }
    first = false;
    prev_end = e;
    all.emplace(s, e);
  }
  for (auto& [lessee, m] : outstanding_) {
    for (auto& [s, e] : m) {
      if (s >= e) return "empty outstanding interval";
      if (!all.emplace(s, e).second) return "duplicate interval start";
    }
  }
  std::uint64_t cursor = 0;
  for (auto& [s, e] : all) {
    if (s != cursor) {
      return s < cursor ? "counter held twice" : "counters lost from ledger";
    }
    cursor = e;
  }
  if (cursor != space_) return "ledger does not cover the counter space";
  return std::nullopt;
}

namespace {
json ranges_to_json(const std::vector<CounterRange>& rs) {
  json a = json::array();
  for (auto& r : rs) a.push_back({r.start, r.end});
  return a;
}
}  // namespace

std::string CounterLedger::to_json() const {
  json j;
  j["space"] = space_;
  j["free"] = ranges_to_json(free_ranges());
  j["outstanding"] = json::object();
  for (auto& l : lessees()) j["outstanding"][l] = ranges_to_json(outstanding(l));
  return j.dump();
}

CounterLedger CounterLedger::from_json(const std::string& text) {
  auto j = json::parse(text);
  CounterLedger l(j.at("space").get<std::uint64_t>());
  l.free_.clear();
  for (auto& r : j.at("free")) {
    l.free_.emplace(r.at(0).get<std::uint64_t>(), r.at(1).get<std::uint64_t>());
  }
  for (auto& [lessee, rs] : j.at("outstanding").items()) {
    for (auto& r : rs) {
      l.outstanding_[lessee].emplace(r.at(0).get<std::uint64_t>(),
                                     r.at(1).get<std::uint64_t>());
    }
  }
  if (auto err = l.check_invariants()) {
    throw Error(ErrorKind::kLedger, "corrupt ledger state: " + *err);
  }
  return l;
}

KeyBroker::KeyBroker(std::filesystem::path state_file,
                     std::uint64_t counter_space)
    : state_file_(std::move(state_file)), counter_space_(counter_space) {
  if (!state_file_.empty() && std::filesystem::exists(state_file_)) load();
}

void KeyBroker::register_tenant(const std::string& tenant_id,
                                const Key& storage_key) {
  {
    std::unique_lock lk(registry_mu_);
    tenants_[tenant_id] = storage_key;
  }
  persist();
}

void KeyBroker::register_device(const std::string& device_id) {
  if (device_id.empty()) {
    throw Error(ErrorKind::kInvalidArgument, "empty device id");
  }
  {
    std::unique_lock lk(registry_mu_);
    if (devices_.count(device_id)) {
      throw Error(ErrorKind::kLedger, "device already registered: " + device_id);
    }
    devices_.emplace(device_id, std::make_unique<DeviceEntry>(counter_space_));
  }
  persist();
}

bool KeyBroker::has_device(const std::string& device_id) const {
  std::shared_lock lk(registry_mu_);
  return devices_.count(device_id) > 0;
}

KeyBroker::DeviceEntry& KeyBroker::device(const std::string& device_id) const {
  std::shared_lock lk(registry_mu_);
  auto it = devices_.find(device_id);
  if (it == devices_.end()) {
    throw Error(ErrorKind::kNotFound, "unknown device: " + device_id);
  }
  return *it->second;
}

std::vector<LeaseRange> KeyBroker::lease_counters(const std::string& device_id,
                                                  const std::string& lessee_id,
                                                  std::uint64_t units) {
  auto& d = device(device_id);
  std::vector<CounterRange> ranges;
  {
    std::lock_guard lk(d.mu);
    ranges = d.ledger.lease(lessee_id, units);
  }
  persist();
  std::vector<LeaseRange> out;
  for (auto& r : ranges) out.push_back({r, device_id, lessee_id});
  return out;
}

void KeyBroker::return_counters(const std::string& device_id,
                                const std::string& lessee_id,
                                const std::vector<CounterRange>& ranges) {
  auto& d = device(device_id);
  {
    std::lock_guard lk(d.mu);
    d.ledger.give_back(lessee_id, ranges);
  }
  persist();
}

Key KeyBroker::provision_tenant_keys(const AuthContext& auth,
                                     const std::string& tenant_id,
                                     const std::string& device_id) const {
  if (!auth.authenticated) {
    throw Error(ErrorKind::kAuth, "key request on unauthenticated session");
  }
  Key ks;
  {
    std::shared_lock lk(registry_mu_);
    auto it = tenants_.find(tenant_id);
    if (it == tenants_.end()) {
      throw Error(ErrorKind::kNotFound, "unknown tenant: " + tenant_id);
    }
    if (!devices_.count(device_id)) {
      throw Error(ErrorKind::kNotFound, "unknown device: " + device_id);
    }
    ks = it->second;
  }
  return derive_device_key(ks, as_bytes(device_id));
}

CounterLedger KeyBroker::ledger_snapshot(const std::string& device_id) const {
  auto& d = device(device_id);
  std::lock_guard lk(d.mu);
  return d.ledger;
}

void KeyBroker::load() {
  std::ifstream in(state_file_);
  auto j = json::parse(in);
  for (auto& [tenant, hex] : j.at("tenants").items()) {
    auto raw = from_hex(hex.get<std::string>());
    if (raw.size() != 32) throw Error(ErrorKind::kConfig, "bad tenant key");
    Key k;
    std::copy(raw.begin(), raw.end(), k.begin());
    tenants_[tenant] = k;
  }
  for (auto& [dev, ledger] : j.at("devices").items()) {
    auto entry = std::make_unique<DeviceEntry>(counter_space_);
    entry->ledger = CounterLedger::from_json(ledger.dump());
    devices_.emplace(dev, std::move(entry));
  }
}

void KeyBroker::persist() const {
  if (state_file_.empty()) return;
  std::lock_guard plk(persist_mu_);
  json j;
  j["tenants"] = json::object();
  j["devices"] = json::object();
  {
    std::shared_lock lk(registry_mu_);
    for (auto& [t, k] : tenants_) j["tenants"][t] = to_hex(k);
    for (auto& [id, entry] : devices_) {
      std::lock_guard dl(entry->mu);
      j["devices"][id] = json::parse(entry->ledger.to_json());
    }
  }
  auto tmp = state_file_;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << j.dump(1);
    if (!out) throw Error(ErrorKind::kDevice, "cannot write broker state");
  }
  std::filesystem::rename(tmp, state_file_);
}

}  // namespace snvme
