#include "snvme/rpc.hpp"

#include "snvme/layout.hpp"

namespace snvme {

Outgoing make_reject(std::uint64_t request_id, const std::exception& e) {
  RejectMsg r;
  r.request_id = request_id;
  r.message = e.what();
  if (auto* se = dynamic_cast<const SectorError*>(&e)) {
    r.kind = se->kind();
    r.sector = se->sector();
  } else if (auto* err = dynamic_cast<const Error*>(&e)) {
    r.kind = err->kind();
  } else {
    r.kind = ErrorKind::kDevice;
  }
  return {FrameType::kReject, encode(r), {}};
}

Outgoing make_ack(std::uint64_t request_id, Bytes payload) {
  return {FrameType::kAck, encode(AckMsg{request_id, std::move(payload)}), {}};
}

// ---- record fields --------------------------------------------------------

void stamp_records(MutableByteSpan records, const Key& net_key,
                   std::uint64_t& next) {
  const std::size_t n = records.size() / kWireRecordBytes;
  if (next + n > kNetCounterLimit) {
    throw Error(ErrorKind::kCounterExhausted, "network counter space exhausted");
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto rec = records.subspan(i * kWireRecordBytes, kWireRecordBytes);
    const std::uint64_t iv = load_le(rec.subspan(4096, 8), 8);
    const std::uint64_t j = next++;
    auto mac = network_mac(net_key, iv, j);
    std::copy(mac.begin(), mac.end(), rec.begin() + kNetMacOffset);
    store_le(rec.subspan(kNetCounterOffset, 6), j, 6);
  }
}

void admit_records(ByteSpan records, std::uint64_t first_sector,
                   const Key& net_key, ReplayWindow& window) {
  const std::size_t n = records.size() / kWireRecordBytes;
  std::vector<std::uint64_t> js(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rec = records.subspan(i * kWireRecordBytes, kWireRecordBytes);
    const std::uint64_t iv = load_le(rec.subspan(4096, 8), 8);
    const std::uint64_t j = load_le(rec.subspan(kNetCounterOffset, 6), 6);
    auto mac = network_mac(net_key, iv, j);
    bool ok = window.check(j) &&
              constant_time_equal(mac, rec.subspan(kNetMacOffset, 8));
    for (std::size_t k = 0; ok && k < i; ++k) ok = js[k] != j;
    if (!ok) {
      throw SectorError(ErrorKind::kNetworkFreshness, first_sector + i,
                        "stale or forged network counter");
    }
    js[i] = j;
  }
  for (auto j : js) window.accept(j);
}

// ---- pool -----------------------------------------------------------------

WorkerPool::WorkerPool(unsigned threads) {
  for (unsigned i = 0; i < std::max(1u, threads); ++i) {
    threads_.emplace_back([this] { run(); });
  }
}

WorkerPool::~WorkerPool() { stop(); }

void WorkerPool::submit(std::function<void()> task) {
  {
    std::lock_guard lk(mu_);
    if (stopping_) return;
    tasks_.push_back(std::move(task));
  }
  cv_.notify_one();
}

void WorkerPool::stop() {
  {
    std::lock_guard lk(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) {
    if (t.joinable()) t.join();
  }
}

void WorkerPool::run() {
  while (true) {
    std::function<void()> task;
    {
      std::unique_lock lk(mu_);
      cv_.wait(lk, [&] { return stopping_ || !tasks_.empty(); });
      if (tasks_.empty()) return;
      task = std::move(tasks_.front());
      tasks_.pop_front();
    }
    task();
  }
}

// ---- client ---------------------------------------------------------------

RpcClient::RpcClient(std::unique_ptr<Connection> conn, std::uint64_t session,
                     ResponseHook hook)
    : conn_(std::move(conn)), session_(session), hook_(std::move(hook)) {
  reader_ = std::thread([this] { reader(); });
}

RpcClient::~RpcClient() {
  close();
  if (reader_.joinable()) reader_.join();
}

void RpcClient::close() { conn_->close(); }

std::future<Frame> RpcClient::call(Outgoing out) {
  std::future<Frame> fut;
  std::lock_guard sl(send_mu_);
  std::uint64_t id;
  {
    std::lock_guard pl(pending_mu_);
    if (closed_) throw Error(ErrorKind::kTransport, "connection closed");
    id = next_id_++;
    fut = pending_[id].get_future();
  }
  if (out.body.size() < 8) {
    throw Error(ErrorKind::kInvalidArgument, "body lacks request id");
  }
  store_le(out.body, id, 8);
  try {
    if (out.stamp) out.stamp(out.body);
    send_frame(*conn_, {out.type, session_, std::move(out.body)});
  } catch (...) {
    std::lock_guard pl(pending_mu_);
    pending_.erase(id);
    throw;
  }
  return fut;
}

void RpcClient::fail_all(const std::string& why) {
  std::lock_guard pl(pending_mu_);
  closed_ = true;
  for (auto& [id, p] : pending_) {
    p.set_exception(std::make_exception_ptr(Error(ErrorKind::kTransport, why)));
  }
  pending_.clear();
}

void RpcClient::reader() {
  while (true) {
    std::optional<Frame> f;
    try {
      f = recv_frame(*conn_);
    } catch (const Error&) {
      unmatched_.fetch_add(1);
      continue;
    }
    if (!f) break;
    std::uint64_t id;
    try {
      id = request_id_of(*f);
    } catch (const Error&) {
      unmatched_.fetch_add(1);
      continue;
    }
    std::promise<Frame> p;
    {
      std::lock_guard pl(pending_mu_);
      auto it = pending_.find(id);
      if (f->session != session_ || it == pending_.end()) {
        unmatched_.fetch_add(1);
        continue;
      }
      p = std::move(it->second);
      pending_.erase(it);
    }
    try {
      if (f->type == FrameType::kReject) raise_reject(decode_reject(f->body));
      if (hook_) hook_(*f);
      p.set_value(std::move(*f));
    } catch (...) {
      p.set_exception(std::current_exception());
    }
  }
  fail_all("connection closed");
}

// ---- server ---------------------------------------------------------------

RpcServer::RpcServer(RpcService& service, Credentials creds, unsigned workers)
    : service_(service), creds_(std::move(creds)), pool_(workers) {}

RpcServer::~RpcServer() { stop(); }

void RpcServer::serve(std::unique_ptr<Connection> conn) {
  auto c = std::make_shared<Conn>();
  c->conn = std::move(conn);
  std::lock_guard lk(conns_mu_);
  if (stopped_) return;
  conns_.push_back(c);
  c->reader = std::thread([this, c] { run_conn(c); });
}

void RpcServer::serve_listener(TcpListener& listener) {
  while (auto conn = listener.accept()) serve(std::move(conn));
}

void RpcServer::stop() {
  std::list<std::shared_ptr<Conn>> conns;
  {
    std::lock_guard lk(conns_mu_);
    stopped_ = true;
    conns.swap(conns_);
  }
  for (auto& c : conns) c->conn->close();
  for (auto& c : conns) {
    if (c->reader.joinable()) c->reader.join();
  }
  pool_.stop();
}

void RpcServer::respond(Conn& c, Outgoing out) {
  std::lock_guard sl(c.send_mu);
  try {
    if (out.stamp) out.stamp(out.body);
    send_frame(*c.conn, {out.type, c.session->keys.session_id,
                         std::move(out.body)});
  } catch (const Error&) {
    // Peer went away, or stamping failed; nothing left to tell it.
  }
}

void RpcServer::run_conn(std::shared_ptr<Conn> c) {
  try {
    c->session = std::make_unique<ServerSession>(
        server_handshake(*c->conn, creds_));
  } catch (const Error&) {
    c->conn->close();
    return;
  }
  while (true) {
    std::optional<Frame> f;
    try {
      f = recv_frame(*c->conn);
    } catch (const Error&) {
      continue;  // malformed frame: drop it
    }
    if (!f) break;
    std::uint64_t id = 0;
    try {
      id = request_id_of(*f);
      if (f->session != c->session->keys.session_id) {
        throw Error(ErrorKind::kProtocol, "wrong session id");
      }
      service_.admit(*c->session, *f);
    } catch (const std::exception& e) {
      respond(*c, make_reject(id, e));
      continue;
    }
    pool_.submit([this, c, f = std::move(*f)]() mutable {
      Outgoing out;
      try {
        out = service_.handle(*c->session, f);
      } catch (const std::exception& e) {
        out = make_reject(request_id_of(f), e);
      }
      respond(*c, std::move(out));
    });
  }
  c->conn->close();
}

}  // namespace snvme
