#include "snvme/local_engine.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "snvme/config.hpp"

namespace snvme {

// ---- key broker links -------------------------------------------------------

void BrokerLink::register_device(const std::string& device) {
  broker_.register_device(device);
}

std::vector<CounterRange> BrokerLink::lease(const std::string& device,
                                            const std::string& lessee,
                                            std::uint64_t units) {
  std::vector<CounterRange> out;
  for (auto& lr : broker_.lease_counters(device, lessee, units)) {
    out.push_back(lr.range);
  }
  return out;
}

void BrokerLink::give_back(const std::string& device,
                           const std::string& lessee,
                           const std::vector<CounterRange>& ranges) {
  broker_.return_counters(device, lessee, ranges);
}

Key BrokerLink::provision_key(const std::string& tenant,
                              const std::string& device) {
  return broker_.provision_tenant_keys(auth_, tenant, device);
}

// ---- counter pool -------------------------------------------------------------

CounterPool::CounterPool(Refill refill, std::uint64_t watermark)
    : refill_(std::move(refill)), watermark_(watermark) {}

CounterPool::~CounterPool() {
  wait_refill();
  if (worker_.joinable()) worker_.join();
}

void CounterPool::add(const std::vector<CounterRange>& ranges) {
  std::lock_guard lk(mu_);
  for (auto r : ranges) {
    if (r.start == 0) r.start = 1;
    if (r.end > kIvCounterLimit) r.end = kIvCounterLimit;
    if (r.start >= r.end) continue;
    ranges_.push_back(r);
    remaining_ += r.size();
  }
  cv_.notify_all();
}

std::vector<std::uint64_t> CounterPool::take(std::size_t n) {
  std::unique_lock lk(mu_);
  while (remaining_ < n) {
    if (in_flight_) {
      cv_.wait(lk, [&] { return !in_flight_; });
      continue;
    }
    in_flight_ = true;
    lk.unlock();
    std::vector<CounterRange> got;
    bool ok = true;
    try {
      got = refill_();
    } catch (const std::exception&) {
      ok = false;
    }
    if (ok) refills_.fetch_add(1);
    add(got);
    lk.lock();
    in_flight_ = false;
    cv_.notify_all();
    if (remaining_ < n && (!ok || got.empty())) {
      throw Error(ErrorKind::kCounterExhausted,
                  "counter pool exhausted and refill failed");
    }
  }
  std::vector<std::uint64_t> out;
  out.reserve(n);
  while (out.size() < n) {
    auto& r = ranges_.front();
    out.push_back(r.start++);
    if (r.start == r.end) ranges_.erase(ranges_.begin());
  }
  remaining_ -= n;
  if (remaining_ < watermark_ && !in_flight_) start_refill_locked();
  return out;
}

void CounterPool::start_refill_locked() {
  in_flight_ = true;
  // The previous worker has cleared in_flight_ and is exiting.
  if (worker_.joinable()) worker_.join();
  worker_ = std::thread([this] { refill_body(); });
}

void CounterPool::refill_body() {
  std::vector<CounterRange> got;
  bool ok = true;
  try {
    got = refill_();
  } catch (const std::exception&) {
    ok = false;
  }
  if (ok) refills_.fetch_add(1);
  add(got);
  std::lock_guard lk(mu_);
  in_flight_ = false;
  cv_.notify_all();
}

std::uint64_t CounterPool::remaining() const {
  std::lock_guard lk(mu_);
  return remaining_;
}

std::vector<CounterRange> CounterPool::release_all() {
  std::unique_lock lk(mu_);
  cv_.wait(lk, [&] { return !in_flight_; });
  auto out = std::move(ranges_);
  ranges_.clear();
  remaining_ = 0;
  return out;
}

void CounterPool::wait_refill() {
  std::unique_lock lk(mu_);
  cv_.wait(lk, [&] { return !in_flight_; });
}

// ---- config -------------------------------------------------------------------

namespace {

std::uint64_t as_uint(const TomlValue& v, const std::string& key) {
  auto* i = std::get_if<std::int64_t>(&v);
  if (!i || *i < 0) {
    throw Error(ErrorKind::kConfig, key + " must be a non-negative integer");
  }
  return static_cast<std::uint64_t>(*i);
}

const std::string& as_string(const TomlValue& v, const std::string& key) {
  auto* s = std::get_if<std::string>(&v);
  if (!s) throw Error(ErrorKind::kConfig, key + " must be a string");
  return *s;
}

}  // namespace

LocalConfig parse_local_config(const std::string& text) {
  auto doc = parse_toml(text);
  LocalConfig c;
  auto it = doc.find("local");
  if (it == doc.end()) return c;
  for (auto& [k, v] : it->second) {
    if (k == "device") c.device = as_string(v, k);
    else if (k == "tenant") c.tenant = as_string(v, k);
    else if (k == "lessee") c.lessee = as_string(v, k);
    else if (k == "lease_units") c.lease_units = as_uint(v, k);
    else if (k == "watermark") c.watermark = as_uint(v, k);
    else if (k == "key_id") c.key_id = static_cast<std::uint32_t>(as_uint(v, k));
    else if (k == "key_write_budget") c.key_write_budget = as_uint(v, k);
    else if (k == "data_sectors") c.data_sectors = as_uint(v, k);
    else if (k == "lease_cache") c.lease_cache = as_string(v, k);
    else if (k == "remote_host") c.remote_host = as_string(v, k);
    else if (k == "remote_port") c.remote_port = static_cast<std::uint16_t>(as_uint(v, k));
    else if (k == "kbs_host") c.kbs_host = as_string(v, k);
    else if (k == "kbs_port") c.kbs_port = static_cast<std::uint16_t>(as_uint(v, k));
    else if (k == "measurement") c.remote_creds.measurement = as_string(v, k);
    else if (k == "expected_peer") c.remote_creds.expected_peer = as_string(v, k);
    else if (k == "psk") {
      auto b = from_hex(as_string(v, k));
      if (b.size() != c.remote_creds.psk.size()) {
        throw Error(ErrorKind::kConfig, "psk must be 64 hex digits");
      }
      std::copy(b.begin(), b.end(), c.remote_creds.psk.begin());
    } else if (k == "aead") {
      auto& s = as_string(v, k);
      if (s == "aes-256-gcm") c.suite.aead = AeadId::kAes256Gcm;
      else if (s == "chacha20-poly1305") c.suite.aead = AeadId::kChaCha20Poly1305;
      else throw Error(ErrorKind::kConfig, "unknown aead '" + s + "'");
    } else if (k == "hash") {
      auto& s = as_string(v, k);
      if (s == "blake3") c.suite.hash = HashId::kBlake3;
      else if (s == "sha256") c.suite.hash = HashId::kSha256;
      else throw Error(ErrorKind::kConfig, "unknown hash '" + s + "'");
    } else {
      throw Error(ErrorKind::kConfig, "unknown key local." + k);
    }
  }
  if (c.lease_units == 0) {
    throw Error(ErrorKind::kConfig, "lease_units must be positive");
  }
  return c;
}

LocalConfig load_local_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_local_config(ss.str());
}

// ---- engine -------------------------------------------------------------------

LocalEngine::LocalEngine(std::unique_ptr<Connection> remote, KbsLink& kbs,
                         LocalConfig cfg)
    : cfg_(std::move(cfg)), kbs_(kbs), key_id_(cfg_.key_id) {
  device_key_ = kbs_.provision_key(cfg_.tenant, cfg_.device);
  const auto wm = cfg_.watermark ? cfg_.watermark : cfg_.lease_units / 4;
  pool_ = std::make_unique<CounterPool>(
      [this] { return kbs_.lease(cfg_.device, cfg_.lessee, cfg_.lease_units); },
      wm);
  auto cached = load_lease_cache();
  pool_->add(cached.empty()
                 ? kbs_.lease(cfg_.device, cfg_.lessee, cfg_.lease_units)
                 : cached);

  keys_ = client_handshake(*remote, cfg_.remote_creds);
  window_ = ReplayWindow(keys_.recv_start);
  next_send_ = keys_.send_start;
  rpc_ = std::make_unique<RpcClient>(std::move(remote), keys_.session_id,
                                     [this](Frame& f) { on_response(f); });
}

LocalEngine::~LocalEngine() {
  try {
    shutdown();
  } catch (const std::exception&) {
  }
}

const Key& LocalEngine::data_key(std::uint32_t key_id) {
  std::lock_guard lk(key_mu_);
  auto it = data_keys_.find(key_id);
  if (it == data_keys_.end()) {
    it = data_keys_
             .emplace(key_id, derive_data_key(device_key_, key_id, cfg_.suite))
             .first;
  }
  return it->second;
}

void LocalEngine::check_range(std::uint64_t lba, std::uint64_t count) const {
  if (count == 0) throw Error(ErrorKind::kInvalidArgument, "empty request");
  if (cfg_.data_sectors &&
      (lba >= cfg_.data_sectors || count > cfg_.data_sectors - lba)) {
    throw SectorError(ErrorKind::kOutOfRange, lba, "request past device end");
  }
}

void LocalEngine::roll_key() {
  std::lock_guard lk(key_mu_);
  key_id_.fetch_add(1);
  under_key_.store(0);
}

std::future<void> LocalEngine::write_async(std::uint64_t lba, ByteSpan data) {
  if (data.size() % kSectorBytes != 0) {
    throw Error(ErrorKind::kInvalidArgument, "write is not whole sectors");
  }
  const std::uint64_t n = data.size() / kSectorBytes;
  check_range(lba, n);
  if (shut_) throw Error(ErrorKind::kTransport, "engine is shut down");

  auto counters = pool_->take(n);
  std::uint32_t kid = key_id_.load();
  if (cfg_.key_write_budget) {
    std::lock_guard lk(key_mu_);
    if (under_key_.load() + n > cfg_.key_write_budget &&
        under_key_.load() > 0) {
      key_id_.fetch_add(1);
      under_key_.store(0);
    }
    kid = key_id_.load();
    under_key_.fetch_add(n);
  }
  const Key& key = data_key(kid);

  WriteMsg m;
  m.device = cfg_.device;
  m.start = lba;
  m.records.resize(n * kWireRecordBytes);
  for (std::uint64_t i = 0; i < n; ++i) {
    auto rec = MutableByteSpan(m.records).subspan(i * kWireRecordBytes,
                                                  kWireRecordBytes);
    SectorMetadata64 meta;
    meta.iv_counter = counters[i];
    meta.key_id = kid;
    meta.aead_tag = seal_sector(key, lba + i, counters[i],
                                data.subspan(i * kSectorBytes, kSectorBytes),
                                rec.first(kSectorBytes), cfg_.suite);
    auto e = meta.encode();
    std::copy(e.begin(), e.end(), rec.begin() + kSectorBytes);
  }
  const std::size_t off = 8 + 2 + m.device.size() + 8 + 4;
  Outgoing out{FrameType::kWrite, encode(m), {}};
  out.stamp = [this, off](Bytes& body) {
    stamp_records(MutableByteSpan(body).subspan(off), keys_.net_key,
                  next_send_);
  };
  auto fut = rpc_->call(std::move(out));
  writes_.fetch_add(n);
  requests_.fetch_add(1);
  return std::async(std::launch::deferred, [f = std::move(fut)]() mutable {
    auto resp = f.get();
    if (resp.type != FrameType::kAck) {
      throw Error(ErrorKind::kProtocol, "unexpected response to WRITE");
    }
  });
}

void LocalEngine::on_response(Frame& f) {
  if (f.type != FrameType::kReadResp) return;
  if (f.body.size() < 12 || (f.body.size() - 12) % kWireRecordBytes != 0) {
    throw Error(ErrorKind::kProtocol, "malformed READ_RESP");
  }
  // Sectors are reported relative to the request start.
  admit_records(ByteSpan(f.body).subspan(12), 0, keys_.net_key, window_);
}

std::future<Bytes> LocalEngine::read_async(std::uint64_t lba,
                                           std::uint32_t count) {
  check_range(lba, count);
  if (shut_) throw Error(ErrorKind::kTransport, "engine is shut down");
  auto fut = rpc_->call(
      {FrameType::kRead, encode(ReadMsg{0, cfg_.device, lba, count}), {}});
  requests_.fetch_add(1);
  return std::async(std::launch::deferred, [this, lba, count,
                                            f = std::move(fut)]() mutable {
    Frame resp;
    try {
      resp = f.get();
    } catch (const SectorError& e) {
      if (e.kind() != ErrorKind::kNetworkFreshness) throw;
      throw SectorError(e.kind(), lba + e.sector(),
                        "stale or forged network counter");
    }
    if (resp.type != FrameType::kReadResp) {
      throw Error(ErrorKind::kProtocol, "unexpected response to READ");
    }
    auto m = decode_read_resp(resp.body);
    if (m.count() != count) {
      throw Error(ErrorKind::kProtocol, "READ_RESP record count mismatch");
    }
    Bytes out(std::size_t{count} * kSectorBytes);
    std::uint64_t blank = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
      auto rec = ByteSpan(m.records).subspan(i * kWireRecordBytes,
                                             kWireRecordBytes);
      auto meta = SectorMetadata64::decode(rec.subspan(kSectorBytes, 64));
      auto dst = MutableByteSpan(out).subspan(i * kSectorBytes, kSectorBytes);
      if (meta.iv_counter == 0) {
        if (meta.key_id != 0 || !all_zero(meta.aead_tag) ||
            !all_zero(rec.first(kSectorBytes))) {
          throw SectorError(ErrorKind::kIntegrity, lba + i,
                            "unwritten sector carries data");
        }
        ++blank;
        continue;  // dst is already zero
      }
      open_sector(data_key(meta.key_id), lba + i, meta.iv_counter,
                  rec.first(kSectorBytes), meta.aead_tag, dst, cfg_.suite);
    }
    reads_.fetch_add(count);
    unwritten_.fetch_add(blank);
    return out;
  });
}

void LocalEngine::flush() {
  rpc_->call_sync(
      {FrameType::kDrain, encode(DeviceMsg{0, cfg_.device}), {}});
}

RecoveryReport LocalEngine::recover() {
  auto f = rpc_->call_sync(
      {FrameType::kRecover, encode(DeviceMsg{0, cfg_.device}), {}});
  return decode_recovery(decode_ack(f.body).payload);
}

void LocalEngine::shutdown() {
  if (shut_) return;
  shut_ = true;
  auto left = pool_->release_all();
  if (rpc_) rpc_->close();
  if (!cfg_.lease_cache.empty()) {
    save_lease_cache(left);
  } else if (!left.empty()) {
    kbs_.give_back(cfg_.device, cfg_.lessee, left);
  }
}

void LocalEngine::save_lease_cache(const std::vector<CounterRange>& ranges) {
  nlohmann::json j;
  j["device"] = cfg_.device;
  j["lessee"] = cfg_.lessee;
  j["ranges"] = nlohmann::json::array();
  for (auto& r : ranges) j["ranges"].push_back({r.start, r.end});
  auto tmp = cfg_.lease_cache;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << j.dump() << '\n';
    if (!out) throw Error(ErrorKind::kConfig, "cannot write lease cache");
  }
  std::filesystem::rename(tmp, cfg_.lease_cache);
}

std::vector<CounterRange> LocalEngine::load_lease_cache() {
  std::vector<CounterRange> out;
  if (cfg_.lease_cache.empty() || !std::filesystem::exists(cfg_.lease_cache)) {
    return out;
  }
  std::ifstream in(cfg_.lease_cache);
  auto j = nlohmann::json::parse(in, nullptr, false);
  // Consumed now, so a crash before the next clean shutdown cannot reissue.
  std::filesystem::remove(cfg_.lease_cache);
  if (j.is_discarded() || j.value("device", "") != cfg_.device ||
      j.value("lessee", "") != cfg_.lessee) {
    return out;
  }
  for (auto& r : j["ranges"]) {
    out.push_back({r.at(0).get<std::uint64_t>(), r.at(1).get<std::uint64_t>()});
  }
  return out;
}

LocalStats LocalEngine::stats() const {
  LocalStats s;
  s.writes = writes_.load();
  s.reads = reads_.load();
  s.unwritten_reads = unwritten_.load();
  s.counters_used = s.writes;
  s.refills = pool_->refills();
  s.requests = requests_.load();
  s.key_id = key_id_.load();
  return s;
}

}  // namespace snvme
