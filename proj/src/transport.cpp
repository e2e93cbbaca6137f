#include "snvme/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <openssl/rand.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "snvme/layout.hpp"

namespace snvme {

const char* to_string(FrameType t) noexcept {
  switch (t) {
    case FrameType::kHello: return "HELLO";
    case FrameType::kAttest: return "ATTEST";
    case FrameType::kWrite: return "WRITE";
    case FrameType::kRead: return "READ";
    case FrameType::kReadResp: return "READ_RESP";
    case FrameType::kAck: return "ACK";
    case FrameType::kReject: return "REJECT";
    case FrameType::kLease: return "LEASE";
    case FrameType::kReturn: return "RETURN";
    case FrameType::kKey: return "KEY";
    case FrameType::kDrain: return "DRAIN";
    case FrameType::kRecover: return "RECOVER";
    case FrameType::kRegisterDevice: return "REGISTER_DEVICE";
  }
  return "?";
}

namespace {

[[noreturn]] void protocol_error(const std::string& what) {
  throw Error(ErrorKind::kProtocol, what);
}

void expect_done(const ByteReader& r) {
  if (!r.done()) protocol_error("trailing bytes in message body");
}

template <std::size_t N>
void read_array(ByteReader& r, ByteArray<N>& out) {
  auto s = r.bytes(N);
  std::copy(s.begin(), s.end(), out.begin());
}

Bytes read_records(ByteReader& r) {
  auto count = r.u32();
  if (static_cast<std::uint64_t>(count) * kWireRecordBytes != r.remaining()) {
    protocol_error("record count does not match body length");
  }
  auto s = r.bytes(r.remaining());
  return {s.begin(), s.end()};
}

void write_records(ByteWriter& w, const Bytes& records) {
  if (records.size() % kWireRecordBytes != 0) {
    throw Error(ErrorKind::kInvalidArgument, "partial wire record");
  }
  w.u32(static_cast<std::uint32_t>(records.size() / kWireRecordBytes));
  w.bytes(records);
}

}  // namespace

Bytes encode_frame(const Frame& f) {
  if (f.body.size() > kMaxFrameBody) {
    throw Error(ErrorKind::kInvalidArgument, "frame body too large");
  }
  ByteWriter w;
  w.buffer().reserve(kFrameHeaderBytes + f.body.size());
  w.bytes(kFrameMagic);
  w.u8(kFrameVersion);
  w.u8(static_cast<std::uint8_t>(f.type));
  w.u64(f.session);
  w.u32(static_cast<std::uint32_t>(f.body.size()));
  w.bytes(f.body);
  return w.take();
}

FrameHeader decode_header(ByteSpan in) {
  if (in.size() < kFrameHeaderBytes) protocol_error("truncated frame header");
  if (!std::equal(in.begin(), in.begin() + 4, kFrameMagic)) {
    protocol_error("bad frame magic");
  }
  if (in[4] != kFrameVersion) protocol_error("unsupported frame version");
  auto t = in[5];
  if (t < static_cast<std::uint8_t>(FrameType::kHello) ||
      t > static_cast<std::uint8_t>(FrameType::kRegisterDevice)) {
    protocol_error("unknown frame type " + std::to_string(t));
  }
  FrameHeader h{static_cast<FrameType>(t), load_le(in.subspan(6), 8),
                static_cast<std::uint32_t>(load_le(in.subspan(14), 4))};
  if (h.length > kMaxFrameBody) protocol_error("frame body too large");
  return h;
}

Frame decode_frame(ByteSpan in) {
  auto h = decode_header(in);
  if (in.size() != kFrameHeaderBytes + h.length) {
    protocol_error("frame length mismatch");
  }
  auto body = in.subspan(kFrameHeaderBytes);
  return {h.type, h.session, Bytes(body.begin(), body.end())};
}

std::uint64_t request_id_of(const Frame& f) {
  if (f.body.size() < 8) protocol_error("body lacks request id");
  return load_le(f.body, 8);
}

Bytes encode(const HelloMsg& m) {
  ByteWriter w;
  w.u64(m.request_id);
  w.bytes(m.nonce);
  w.u48(m.send_start);
  w.str(m.measurement);
  w.bytes(m.binder);
  return w.take();
}

HelloMsg decode_hello(ByteSpan body) {
  ByteReader r(body);
  HelloMsg m;
  m.request_id = r.u64();
  read_array(r, m.nonce);
  m.send_start = r.u48();
  m.measurement = r.str();
  read_array(r, m.binder);
  expect_done(r);
  return m;
}

Bytes encode(const WriteMsg& m) {
  ByteWriter w;
  w.buffer().reserve(32 + m.device.size() + m.records.size());
  w.u64(m.request_id);
  w.str(m.device);
  w.u64(m.start);
  write_records(w, m.records);
  return w.take();
}

WriteMsg decode_write(ByteSpan body) {
  ByteReader r(body);
  WriteMsg m;
  m.request_id = r.u64();
  m.device = r.str();
  m.start = r.u64();
  m.records = read_records(r);
  return m;
}

Bytes encode(const ReadMsg& m) {
  ByteWriter w;
  w.u64(m.request_id);
  w.str(m.device);
  w.u64(m.start);
  w.u32(m.count);
  return w.take();
}

ReadMsg decode_read(ByteSpan body) {
  ByteReader r(body);
  ReadMsg m;
  m.request_id = r.u64();
  m.device = r.str();
  m.start = r.u64();
  m.count = r.u32();
  expect_done(r);
  return m;
}

Bytes encode(const ReadRespMsg& m) {
  ByteWriter w;
  w.buffer().reserve(12 + m.records.size());
  w.u64(m.request_id);
  write_records(w, m.records);
  return w.take();
}

ReadRespMsg decode_read_resp(ByteSpan body) {
  ByteReader r(body);
  ReadRespMsg m;
  m.request_id = r.u64();
  m.records = read_records(r);
  return m;
}

Bytes encode(const AckMsg& m) {
  ByteWriter w;
  w.u64(m.request_id);
  w.bytes(m.payload);
  return w.take();
}

AckMsg decode_ack(ByteSpan body) {
  ByteReader r(body);
  AckMsg m;
  m.request_id = r.u64();
  auto rest = r.bytes(r.remaining());
  m.payload.assign(rest.begin(), rest.end());
  return m;
}

Bytes encode(const RejectMsg& m) {
  ByteWriter w;
  w.u64(m.request_id);
  w.u8(static_cast<std::uint8_t>(m.kind));
  w.u64(m.sector);
  w.str(m.message.size() > 0xffff ? m.message.substr(0, 0xffff) : m.message);
  return w.take();
}

RejectMsg decode_reject(ByteSpan body) {
  ByteReader r(body);
  RejectMsg m;
  m.request_id = r.u64();
  auto k = r.u8();
  if (k < static_cast<std::uint8_t>(ErrorKind::kInvalidArgument) ||
      k > static_cast<std::uint8_t>(ErrorKind::kConfig)) {
    protocol_error("unknown error kind in REJECT");
  }
  m.kind = static_cast<ErrorKind>(k);
  m.sector = r.u64();
  m.message = r.str();
  expect_done(r);
  return m;
}

Bytes encode(const LeaseMsg& m) {
  ByteWriter w;
  w.u64(m.request_id);
  w.str(m.device);
  w.str(m.lessee);
  w.u64(m.units);
  return w.take();
}

LeaseMsg decode_lease(ByteSpan body) {
  ByteReader r(body);
  LeaseMsg m;
  m.request_id = r.u64();
  m.device = r.str();
  m.lessee = r.str();
  m.units = r.u64();
  expect_done(r);
  return m;
}

Bytes encode_ranges(const std::vector<CounterRange>& ranges) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(ranges.size()));
  for (auto& r : ranges) {
    w.u64(r.start);
    w.u64(r.end);
  }
  return w.take();
}

namespace {
std::vector<CounterRange> read_ranges(ByteReader& r) {
  auto n = r.u32();
  if (static_cast<std::uint64_t>(n) * 16 > r.remaining()) {
    protocol_error("range count exceeds body");
  }
  std::vector<CounterRange> out(n);
  for (auto& x : out) {
    x.start = r.u64();
    x.end = r.u64();
  }
  return out;
}
}  // namespace

std::vector<CounterRange> decode_ranges(ByteSpan in) {
  ByteReader r(in);
  auto out = read_ranges(r);
  expect_done(r);
  return out;
}

Bytes encode(const ReturnMsg& m) {
  ByteWriter w;
  w.u64(m.request_id);
  w.str(m.device);
  w.str(m.lessee);
  w.bytes(encode_ranges(m.ranges));
  return w.take();
}

ReturnMsg decode_return(ByteSpan body) {
  ByteReader r(body);
  ReturnMsg m;
  m.request_id = r.u64();
  m.device = r.str();
  m.lessee = r.str();
  m.ranges = read_ranges(r);
  expect_done(r);
  return m;
}

Bytes encode(const KeyMsg& m) {
  ByteWriter w;
  w.u64(m.request_id);
  w.str(m.tenant);
  w.str(m.device);
  return w.take();
}

KeyMsg decode_key(ByteSpan body) {
  ByteReader r(body);
  KeyMsg m;
  m.request_id = r.u64();
  m.tenant = r.str();
  m.device = r.str();
  expect_done(r);
  return m;
}

Bytes encode(const DeviceMsg& m) {
  ByteWriter w;
  w.u64(m.request_id);
  w.str(m.device);
  return w.take();
}

DeviceMsg decode_device(ByteSpan body) {
  ByteReader r(body);
  DeviceMsg m;
  m.request_id = r.u64();
  m.device = r.str();
  expect_done(r);
  return m;
}

void raise_reject(const RejectMsg& r) {
  if (r.sector != kNoSector) throw SectorError(r.kind, r.sector, r.message);
  throw Error(r.kind, r.message);
}

void send_frame(Connection& c, const Frame& f) { c.send(encode_frame(f)); }

std::optional<Frame> recv_frame(Connection& c) {
  auto raw = c.recv();
  if (!raw) return std::nullopt;
  return decode_frame(*raw);
}

// ---- in-process pipe ------------------------------------------------------

class PipeEnd : public Connection {
 public:
  PipeEnd(std::shared_ptr<Tap::Queue> in, std::shared_ptr<Tap::Queue> out,
          Direction dir, std::shared_ptr<Tap> tap)
      : in_(std::move(in)), out_(std::move(out)), dir_(dir),
        tap_(std::move(tap)) {}
  ~PipeEnd() override { close(); }

  void send(Bytes frame) override {
    if (tap_ && !tap_->filter(dir_, frame)) return;
    push(*out_, std::move(frame));
  }

  std::optional<Bytes> recv() override {
    std::unique_lock lk(in_->mu);
    in_->cv.wait(lk, [&] { return in_->closed || !in_->items.empty(); });
    if (in_->items.empty()) return std::nullopt;
    auto f = std::move(in_->items.front());
    in_->items.pop_front();
    return f;
  }

  void close() override {
    for (auto* q : {in_.get(), out_.get()}) {
      std::lock_guard lk(q->mu);
      q->closed = true;
      q->cv.notify_all();
    }
  }

  static void push(Tap::Queue& q, Bytes frame) {
    std::lock_guard lk(q.mu);
    if (q.closed) throw Error(ErrorKind::kTransport, "connection closed");
    q.items.push_back(std::move(frame));
    q.cv.notify_one();
  }

 private:
  std::shared_ptr<Tap::Queue> in_, out_;
  Direction dir_;
  std::shared_ptr<Tap> tap_;
};

void Tap::set_hook(Hook h) {
  std::lock_guard lk(mu_);
  hook_ = std::move(h);
}

void Tap::record(bool on) {
  std::lock_guard lk(mu_);
  recording_ = on;
}

std::vector<Bytes> Tap::captured(Direction d) const {
  std::lock_guard lk(mu_);
  return captured_[static_cast<int>(d)];
}

void Tap::clear() {
  std::lock_guard lk(mu_);
  captured_[0].clear();
  captured_[1].clear();
}

bool Tap::filter(Direction d, Bytes& frame) {
  Hook h;
  {
    std::lock_guard lk(mu_);
    if (recording_) captured_[static_cast<int>(d)].push_back(frame);
    h = hook_;
  }
  return h ? h(d, frame) : true;
}

void Tap::inject(Direction d, Bytes frame) {
  std::shared_ptr<Queue> q;
  {
    std::lock_guard lk(mu_);
    q = d == Direction::kClientToServer ? to_server_ : to_client_;
  }
  if (!q) throw Error(ErrorKind::kTransport, "tap is not attached");
  PipeEnd::push(*q, std::move(frame));
}

std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_pipe(
    std::shared_ptr<Tap> tap) {
  auto to_server = std::make_shared<Tap::Queue>();
  auto to_client = std::make_shared<Tap::Queue>();
  if (tap) {
    std::lock_guard lk(tap->mu_);
    tap->to_server_ = to_server;
    tap->to_client_ = to_client;
  }
  auto client = std::make_unique<PipeEnd>(to_client, to_server,
                                          Direction::kClientToServer, tap);
  auto server = std::make_unique<PipeEnd>(to_server, to_client,
                                          Direction::kServerToClient, tap);
  return {std::move(client), std::move(server)};
}

// ---- TCP ------------------------------------------------------------------

namespace {

class TcpConnection : public Connection {
 public:
  explicit TcpConnection(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpConnection() override {
    close();
    ::close(fd_);
  }

  void send(Bytes frame) override {
    std::lock_guard lk(send_mu_);
    const std::uint8_t* p = frame.data();
    std::size_t left = frame.size();
    while (left > 0) {
      auto n = ::send(fd_, p, left, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(ErrorKind::kTransport,
                    std::string("send: ") + std::strerror(errno));
      }
      p += n;
      left -= static_cast<std::size_t>(n);
    }
  }

  std::optional<Bytes> recv() override {
    Bytes frame(kFrameHeaderBytes);
    if (!read_exact(frame.data(), kFrameHeaderBytes)) return std::nullopt;
    auto h = decode_header(frame);
    frame.resize(kFrameHeaderBytes + h.length);
    if (!read_exact(frame.data() + kFrameHeaderBytes, h.length)) {
      return std::nullopt;
    }
    return frame;
  }

  void close() override { ::shutdown(fd_, SHUT_RDWR); }

 private:
  bool read_exact(std::uint8_t* p, std::size_t n) {
    while (n > 0) {
      auto got = ::recv(fd_, p, n, 0);
      if (got < 0 && errno == EINTR) continue;
      if (got <= 0) return false;
      p += got;
      n -= static_cast<std::size_t>(got);
    }
    return true;
  }

  int fd_;
  std::mutex send_mu_;
};

}  // namespace

TcpListener::TcpListener(std::uint16_t port, const std::string& host) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw Error(ErrorKind::kTransport, "socket() failed");
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd_);
    throw Error(ErrorKind::kConfig, "bad listen address " + host);
  }
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(fd_, 64) != 0) {
    auto msg = std::string("bind/listen: ") + std::strerror(errno);
    ::close(fd_);
    throw Error(ErrorKind::kTransport, msg);
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
  close();
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<Connection> TcpListener::accept() {
  while (true) {
    int c = ::accept(fd_, nullptr, nullptr);
    if (c >= 0) return std::make_unique<TcpConnection>(c);
    if (errno == EINTR) continue;
    return nullptr;
  }
}

void TcpListener::close() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

std::unique_ptr<Connection> tcp_connect(const std::string& host,
                                        std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  auto service = std::to_string(port);
  if (::getaddrinfo(host.c_str(), service.c_str(), &hints, &res) != 0) {
    throw Error(ErrorKind::kTransport, "cannot resolve " + host);
  }
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  int rc = fd < 0 ? -1 : ::connect(fd, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc != 0) {
    if (fd >= 0) ::close(fd);
    throw Error(ErrorKind::kTransport,
                "connect " + host + ":" + service + ": " + std::strerror(errno));
  }
  return std::make_unique<TcpConnection>(fd);
}

// ---- handshake ------------------------------------------------------------

namespace {

template <std::size_t N>
ByteArray<N> random_array() {
  ByteArray<N> out;
  if (RAND_bytes(out.data(), N) != 1) {
    throw Error(ErrorKind::kAuth, "RNG failure");
  }
  return out;
}

ByteArray<6> le6(std::uint64_t v) {
  ByteArray<6> b;
  store_le(b, v, 6);
  return b;
}

ByteArray<8> le8(std::uint64_t v) {
  ByteArray<8> b;
  store_le(b, v, 8);
  return b;
}

ByteArray<32> hello_binder(const Credentials& c, const HelloMsg& m) {
  return hmac(c.psk, {as_bytes("snvme-hello"), m.nonce, le6(m.send_start),
                      as_bytes(m.measurement)});
}

ByteArray<32> attest_binder(const Credentials& c, const HelloMsg& hello,
                            const AttestMsg& m, std::uint64_t session) {
  return hmac(c.psk, {as_bytes("snvme-attest"), hello.nonce, m.nonce,
                      le6(m.send_start), le8(session),
                      as_bytes(m.measurement)});
}

Key session_key(const Credentials& c, const HelloMsg& hello,
                const AttestMsg& attest, std::uint64_t session) {
  return hmac(c.psk, {as_bytes("snvme-knet"), hello.nonce, attest.nonce,
                      le8(session)});
}

}  // namespace

std::uint64_t random_u64() { return load_le(random_array<8>(), 8); }

std::uint64_t random_start_counter() {
  return 1 + random_u64() % ((std::uint64_t{1} << 47) - 1);
}

SessionKeys client_handshake(Connection& c, const Credentials& creds) {
  HelloMsg hello;
  hello.nonce = random_array<32>();
  hello.send_start = random_start_counter();
  hello.measurement = creds.measurement;
  hello.binder = hello_binder(creds, hello);
  send_frame(c, {FrameType::kHello, 0, encode(hello)});

  auto f = recv_frame(c);
  if (!f) throw Error(ErrorKind::kAuth, "peer closed during handshake");
  if (f->type == FrameType::kReject) raise_reject(decode_reject(f->body));
  if (f->type != FrameType::kAttest) {
    throw Error(ErrorKind::kAuth, "expected ATTEST");
  }
  auto attest = decode_hello(f->body);
  if (!creds.expected_peer.empty() &&
      attest.measurement != creds.expected_peer) {
    throw Error(ErrorKind::kAuth, "peer measurement mismatch");
  }
  auto want = attest_binder(creds, hello, attest, f->session);
  if (!constant_time_equal(want, attest.binder)) {
    throw Error(ErrorKind::kAuth, "peer failed attestation");
  }
  SessionKeys k;
  k.session_id = f->session;
  k.net_key = session_key(creds, hello, attest, f->session);
  k.send_start = hello.send_start;
  k.recv_start = attest.send_start;
  k.peer = attest.measurement;
  return k;
}

SessionKeys server_handshake(Connection& c, const Credentials& creds) {
  auto f = recv_frame(c);
  if (!f) throw Error(ErrorKind::kAuth, "peer closed during handshake");
  auto refuse = [&](std::uint64_t rid, const std::string& why) {
    RejectMsg r{rid, ErrorKind::kAuth, kNoSector, why};
    try {
      send_frame(c, {FrameType::kReject, 0, encode(r)});
    } catch (const Error&) {
    }
    throw Error(ErrorKind::kAuth, why);
  };
  if (f->type != FrameType::kHello) refuse(0, "expected HELLO");
  auto hello = decode_hello(f->body);
  if (!creds.expected_peer.empty() &&
      hello.measurement != creds.expected_peer) {
    refuse(hello.request_id, "peer measurement mismatch");
  }
  if (!constant_time_equal(hello_binder(creds, hello), hello.binder)) {
    refuse(hello.request_id, "peer failed attestation");
  }
  if (hello.send_start == 0 || hello.send_start >= kNetCounterLimit) {
    refuse(hello.request_id, "bad start counter");
  }
  std::uint64_t session = 0;
  while (session == 0) session = random_u64();
  AttestMsg attest;
  attest.request_id = hello.request_id;
  attest.nonce = random_array<32>();
  attest.send_start = random_start_counter();
  attest.measurement = creds.measurement;
  attest.binder = attest_binder(creds, hello, attest, session);
  send_frame(c, {FrameType::kAttest, session, encode(attest)});

  SessionKeys k;
  k.session_id = session;
  k.net_key = session_key(creds, hello, attest, session);
  k.send_start = attest.send_start;
  k.recv_start = hello.send_start;
  k.peer = hello.measurement;
  return k;
}

}  // namespace snvme
