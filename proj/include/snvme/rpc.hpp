#pragma once

// Request/response plumbing over a Connection.
//
// Both sides serialize outbound frames under a per-connection send lock and
// run a caller-supplied `stamp` inside it, so counters assigned there appear
// on the wire in increasing order. Inbound frames are examined in arrival
// order on a single reader thread before any concurrent processing.

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <future>
#include <list>
#include <memory>
#include <mutex>
#include <thread>
#include <unordered_map>
#include <vector>

#include "snvme/kbs.hpp"
#include "snvme/replay_window.hpp"
#include "snvme/transport.hpp"

namespace snvme {

struct Outgoing {
  FrameType type = FrameType::kAck;
  Bytes body;  // begins with the request id
  /// Invoked under the send lock just before the frame is encoded.
  std::function<void(Bytes& body)> stamp;
};

Outgoing make_reject(std::uint64_t request_id, const std::exception& e);
Outgoing make_ack(std::uint64_t request_id, Bytes payload = {});

/// Fixed-size FIFO thread pool.
class WorkerPool {
 public:
  explicit WorkerPool(unsigned threads);
  ~WorkerPool();
  void submit(std::function<void()> task);
  void stop();

 private:
  void run();
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> tasks_;
  bool stopping_ = false;
  std::vector<std::thread> threads_;
};

class RpcClient {
 public:
  /// Runs on the reader thread, in arrival order, for every matched response
  /// other than REJECT. Throwing fails that request with the thrown error.
  using ResponseHook = std::function<void(Frame&)>;

  RpcClient(std::unique_ptr<Connection> conn, std::uint64_t session,
            ResponseHook hook = {});
  ~RpcClient();
  RpcClient(const RpcClient&) = delete;
  RpcClient& operator=(const RpcClient&) = delete;

  /// Assigns a request id, stamps, and sends. The future yields the response
  /// frame, or throws the error carried by a REJECT.
  std::future<Frame> call(Outgoing out);
  Frame call_sync(Outgoing out) { return call(std::move(out)).get(); }

  void close();
  std::uint64_t session() const { return session_; }
  std::uint64_t unmatched_responses() const { return unmatched_.load(); }

 private:
  void reader();
  void fail_all(const std::string& why);

  std::unique_ptr<Connection> conn_;
  std::uint64_t session_;
  ResponseHook hook_;
  std::mutex send_mu_;
  std::mutex pending_mu_;
  std::unordered_map<std::uint64_t, std::promise<Frame>> pending_;
  std::uint64_t next_id_ = 1;
  bool closed_ = false;
  std::atomic<std::uint64_t> unmatched_{0};
  std::thread reader_;
};

/// Server-side view of one authenticated connection.
struct ServerSession {
  explicit ServerSession(const SessionKeys& k)
      : keys(k), auth{true, k.peer}, recv_window(k.recv_start),
        next_send(k.send_start) {}

  SessionKeys keys;
  AuthContext auth;
  ReplayWindow recv_window;  // touched only on the reader thread
  std::uint64_t next_send;   // touched only under the send lock
};

// ---- per-record network fields --------------------------------------------

inline constexpr std::size_t kNetMacOffset = 4096 + 44;
inline constexpr std::size_t kNetCounterOffset = 4096 + 52;

/// Assigns j = next, next + 1, ... to the records and writes their network
/// MACs. Throws Error(kCounterExhausted), stamping nothing, when the session
/// would pass 2^48.
void stamp_records(MutableByteSpan records, const Key& net_key,
                   std::uint64_t& next);
/// Checks the counter and MAC of every record, then accepts all counters into
/// the window. On any failure nothing is accepted and SectorError
/// (kNetworkFreshness) names `first_sector` plus the offending index.
void admit_records(ByteSpan records, std::uint64_t first_sector,
                   const Key& net_key, ReplayWindow& window);

class RpcService {
 public:
  virtual ~RpcService() = default;
  /// Ordered admission on the reader thread. Throwing rejects the frame.
  virtual void admit(ServerSession&, const Frame&) {}
  /// Processing; may run concurrently for one session.
  virtual Outgoing handle(ServerSession& s, const Frame& f) = 0;
};

class RpcServer {
 public:
  RpcServer(RpcService& service, Credentials creds, unsigned workers = 4);
  ~RpcServer();

  /// Takes ownership and serves the connection on a background thread:
  /// handshake, then requests until the peer closes.
  void serve(std::unique_ptr<Connection> conn);
  /// Blocks serving connections from `listener` until it is closed.
  void serve_listener(TcpListener& listener);
  void stop();

 private:
  struct Conn {
    std::unique_ptr<Connection> conn;
    std::unique_ptr<ServerSession> session;
    std::mutex send_mu;
    std::thread reader;
  };
  void run_conn(std::shared_ptr<Conn> c);
  void respond(Conn& c, Outgoing out);

  RpcService& service_;
  Credentials creds_;
  WorkerPool pool_;
  std::mutex conns_mu_;
  std::list<std::shared_ptr<Conn>> conns_;
  bool stopped_ = false;
};

}  // namespace snvme
