#pragma once

// Storage server over the wire: WRITE, READ, DRAIN, RECOVER against named
// remote engines.

#include <functional>
#include <map>
#include <memory>
#include <shared_mutex>
#include <string>

#include "snvme/remote_engine.hpp"
#include "snvme/rpc.hpp"

namespace snvme {

/// ACK payload of RECOVER.
Bytes encode_recovery(const RecoveryReport& r);
RecoveryReport decode_recovery(ByteSpan in);

class RemoteService : public RpcService {
 public:
  /// Called with the old engine already destroyed; returns the new one.
  using Reopen = std::function<std::shared_ptr<RemoteEngine>()>;

  /// Without `reopen`, RECOVER on this device is refused.
  void attach(const std::string& device, std::shared_ptr<RemoteEngine> engine,
              Reopen reopen = {});
  std::shared_ptr<RemoteEngine> engine(const std::string& device) const;

  void admit(ServerSession& s, const Frame& f) override;
  Outgoing handle(ServerSession& s, const Frame& f) override;

 private:
  struct Slot {
    std::shared_mutex mu;  // shared per request, exclusive for RECOVER
    std::shared_ptr<RemoteEngine> engine;
    Reopen reopen;
  };
  Slot& slot(const std::string& device) const;

  mutable std::mutex mu_;
  std::map<std::string, std::unique_ptr<Slot>> slots_;
};

}  // namespace snvme
