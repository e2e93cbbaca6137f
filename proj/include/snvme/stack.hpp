#pragma once

// One process hosting the whole path: an in-memory key broker, a simulated
// device behind a remote engine and storage server, and local engines
// connected over in-process pipes or loopback TCP.

#include <filesystem>
#include <memory>
#include <thread>
#include <vector>

#include "snvme/blockdev.hpp"
#include "snvme/local_engine.hpp"
#include "snvme/remote_engine.hpp"
#include "snvme/remote_service.hpp"

namespace snvme {

struct StackOptions {
  std::filesystem::path dir;  // device and NV files go here
  std::uint64_t total_sectors = 4096;
  std::uint32_t data_set_size = kDefaultDataSetSize;
  RemoteConfig remote;
  LocalConfig local;
  unsigned sessions = 1;
  unsigned server_workers = 32;
  bool tcp = false;
  /// Pipe transport only; sits on session 0.
  std::shared_ptr<Tap> tap;
  DelayModel delay;
  std::uint32_t journal_capacity = kDefaultJournalCapacity;
};

class Stack {
 public:
  explicit Stack(StackOptions opt);
  ~Stack();
  Stack(const Stack&) = delete;
  Stack& operator=(const Stack&) = delete;

  LocalEngine& local(unsigned i = 0) { return *locals_.at(i); }
  unsigned sessions() const { return static_cast<unsigned>(locals_.size()); }
  std::shared_ptr<RemoteEngine> remote() const {
    return service_.engine(opt_.local.device);
  }
  SimDevice& device() { return *dev_; }
  KeyBroker& broker() { return broker_; }
  const StackOptions& options() const { return opt_; }
  const std::filesystem::path& nv_path() const { return nv_path_; }

  /// Opens another session (pipe or TCP, as configured). `kbs` replaces the
  /// in-process broker link for this session.
  LocalEngine& add_session(std::shared_ptr<Tap> tap = nullptr,
                           KbsLink* kbs = nullptr);
  /// Shuts down the local engines, then the server and remote engine.
  void close();

 private:
  std::unique_ptr<Connection> connect(std::shared_ptr<Tap> tap);

  StackOptions opt_;
  KeyBroker broker_;
  BrokerLink link_;
  std::unique_ptr<SimDevice> dev_;
  std::filesystem::path nv_path_;
  RemoteService service_;
  std::unique_ptr<RpcServer> server_;
  std::unique_ptr<TcpListener> listener_;
  std::thread accept_thread_;
  std::vector<std::unique_ptr<LocalEngine>> locals_;
  bool closed_ = false;
};

/// Credentials pair used by in-process stacks.
Credentials stack_host_credentials();
Credentials stack_server_credentials();

}  // namespace snvme
