#pragma once

// Wire framing, message bodies, byte channels, and the mocked attestation
// handshake. docs/protocol.md is the normative description.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "snvme/bytes.hpp"
#include "snvme/crypto.hpp"
#include "snvme/error.hpp"
#include "snvme/kbs.hpp"

namespace snvme {

enum class FrameType : std::uint8_t {
  kHello = 1,
  kAttest = 2,
  kWrite = 3,
  kRead = 4,
  kReadResp = 5,
  kAck = 6,
  kReject = 7,
  kLease = 8,
  kReturn = 9,
  kKey = 10,
  kDrain = 11,
  kRecover = 12,
  kRegisterDevice = 13,
};

const char* to_string(FrameType t) noexcept;

inline constexpr std::uint8_t kFrameMagic[4] = {'s', 'N', 'V', 'F'};
inline constexpr std::uint8_t kFrameVersion = 1;
inline constexpr std::size_t kFrameHeaderBytes = 18;
inline constexpr std::uint32_t kMaxFrameBody = 64u << 20;
/// Every WRITE / READ_RESP subrecord: one sector plus 64-byte metadata.
inline constexpr std::size_t kWireRecordBytes = 4096 + 64;
inline constexpr std::uint64_t kNoSector = ~std::uint64_t{0};

struct Frame {
  FrameType type = FrameType::kAck;
  std::uint64_t session = 0;
  Bytes body;

  friend bool operator==(const Frame&, const Frame&) = default;
};

struct FrameHeader {
  FrameType type;
  std::uint64_t session;
  std::uint32_t length;
};

Bytes encode_frame(const Frame& f);
/// Parses exactly one frame occupying all of `in`. Throws Error(kProtocol).
Frame decode_frame(ByteSpan in);
/// Parses the fixed header. Throws Error(kProtocol).
FrameHeader decode_header(ByteSpan in);
/// First 8 body bytes; every body begins with the request id.
std::uint64_t request_id_of(const Frame& f);

// ---- message bodies -------------------------------------------------------

struct HelloMsg {
  std::uint64_t request_id = 0;
  ByteArray<32> nonce{};
  std::uint64_t send_start = 0;  // 48-bit
  std::string measurement;
  ByteArray<32> binder{};
};
using AttestMsg = HelloMsg;

struct WriteMsg {
  std::uint64_t request_id = 0;
  std::string device;
  std::uint64_t start = 0;
  Bytes records;  // count * kWireRecordBytes
  std::uint32_t count() const {
    return static_cast<std::uint32_t>(records.size() / kWireRecordBytes);
  }
};

struct ReadMsg {
  std::uint64_t request_id = 0;
  std::string device;
  std::uint64_t start = 0;
  std::uint32_t count = 0;
};

struct ReadRespMsg {
  std::uint64_t request_id = 0;
  Bytes records;
  std::uint32_t count() const {
    return static_cast<std::uint32_t>(records.size() / kWireRecordBytes);
  }
};

struct AckMsg {
  std::uint64_t request_id = 0;
  Bytes payload;
};

struct RejectMsg {
  std::uint64_t request_id = 0;
  ErrorKind kind = ErrorKind::kProtocol;
  std::uint64_t sector = kNoSector;
  std::string message;
};

struct LeaseMsg {
  std::uint64_t request_id = 0;
  std::string device;
  std::string lessee;
  std::uint64_t units = 0;
};

struct ReturnMsg {
  std::uint64_t request_id = 0;
  std::string device;
  std::string lessee;
  std::vector<CounterRange> ranges;
};

struct KeyMsg {
  std::uint64_t request_id = 0;
  std::string tenant;
  std::string device;
};

/// REGISTER_DEVICE, DRAIN and RECOVER bodies.
struct DeviceMsg {
  std::uint64_t request_id = 0;
  std::string device;
};

Bytes encode(const HelloMsg& m);
Bytes encode(const WriteMsg& m);
Bytes encode(const ReadMsg& m);
Bytes encode(const ReadRespMsg& m);
Bytes encode(const AckMsg& m);
Bytes encode(const RejectMsg& m);
Bytes encode(const LeaseMsg& m);
Bytes encode(const ReturnMsg& m);
Bytes encode(const KeyMsg& m);
Bytes encode(const DeviceMsg& m);

HelloMsg decode_hello(ByteSpan body);
WriteMsg decode_write(ByteSpan body);
ReadMsg decode_read(ByteSpan body);
ReadRespMsg decode_read_resp(ByteSpan body);
AckMsg decode_ack(ByteSpan body);
RejectMsg decode_reject(ByteSpan body);
LeaseMsg decode_lease(ByteSpan body);
ReturnMsg decode_return(ByteSpan body);
KeyMsg decode_key(ByteSpan body);
DeviceMsg decode_device(ByteSpan body);

Bytes encode_ranges(const std::vector<CounterRange>& ranges);
std::vector<CounterRange> decode_ranges(ByteSpan in);

/// Throws the error a REJECT body describes.
[[noreturn]] void raise_reject(const RejectMsg& r);

// ---- channels -------------------------------------------------------------

/// Bidirectional frame channel. Each send carries one encoded frame.
class Connection {
 public:
  virtual ~Connection() = default;
  /// Throws Error(kTransport) once closed.
  virtual void send(Bytes frame) = 0;
  /// Blocks for the next frame; nullopt after close.
  virtual std::optional<Bytes> recv() = 0;
  virtual void close() = 0;
};

void send_frame(Connection& c, const Frame& f);
std::optional<Frame> recv_frame(Connection& c);

enum class Direction { kClientToServer, kServerToClient };

/// Man-in-the-middle hook for in-process pipes: observes, edits, drops, or
/// injects encoded frames.
class Tap {
 public:
  /// Return false to drop the frame.
  using Hook = std::function<bool(Direction, Bytes&)>;

  void set_hook(Hook h);
  void record(bool on);
  std::vector<Bytes> captured(Direction d) const;
  void clear();
  /// Delivers `frame` as though the sender had sent it.
  void inject(Direction d, Bytes frame);

 private:
  friend class PipeEnd;
  friend std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>>
  make_pipe(std::shared_ptr<Tap> tap);
  struct Queue {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Bytes> items;
    bool closed = false;
  };
  bool filter(Direction d, Bytes& frame);

  mutable std::mutex mu_;
  Hook hook_;
  bool recording_ = false;
  std::vector<Bytes> captured_[2];
  std::shared_ptr<Queue> to_server_, to_client_;
};

/// In-process connection pair {client end, server end}.
std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_pipe(
    std::shared_ptr<Tap> tap = nullptr);

class TcpListener {
 public:
  /// Port 0 picks an ephemeral port.
  explicit TcpListener(std::uint16_t port, const std::string& host = "127.0.0.1");
  ~TcpListener();
  std::uint16_t port() const { return port_; }
  /// Blocks; nullptr after close().
  std::unique_ptr<Connection> accept();
  void close();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

std::unique_ptr<Connection> tcp_connect(const std::string& host,
                                        std::uint16_t port);

// ---- handshake ------------------------------------------------------------

/// Mocked attestation material: a pre-shared key and measurement blobs.
struct Credentials {
  Key psk{};
  std::string measurement;
  std::string expected_peer;
};

struct SessionKeys {
  std::uint64_t session_id = 0;
  Key net_key{};
  std::uint64_t send_start = 0;  // first counter this side sends
  std::uint64_t recv_start = 0;  // first counter the peer sends
  std::string peer;
};

/// Random 48-bit start counter in [1, 2^47).
std::uint64_t random_start_counter();
std::uint64_t random_u64();

/// Client side: HELLO, then wait for ATTEST. Throws Error(kAuth) on refusal.
SessionKeys client_handshake(Connection& c, const Credentials& creds);
/// Server side: wait for HELLO, answer ATTEST or REJECT. Throws Error(kAuth).
SessionKeys server_handshake(Connection& c, const Credentials& creds);

}  // namespace snvme
