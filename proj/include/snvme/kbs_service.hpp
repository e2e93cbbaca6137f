#pragma once

// Key broker over the wire: REGISTER_DEVICE, LEASE, RETURN, KEY.

#include <memory>

#include "snvme/kbs.hpp"
#include "snvme/rpc.hpp"

namespace snvme {

class KbsService : public RpcService {
 public:
  explicit KbsService(KeyBroker& broker) : broker_(broker) {}
  Outgoing handle(ServerSession& s, const Frame& f) override;

 private:
  KeyBroker& broker_;
};

class KbsClient {
 public:
  /// Performs the handshake on `conn`.
  KbsClient(std::unique_ptr<Connection> conn, const Credentials& creds);

  void register_device(const std::string& device);
  std::vector<CounterRange> lease(const std::string& device,
                                  const std::string& lessee,
                                  std::uint64_t units);
  void give_back(const std::string& device, const std::string& lessee,
                 const std::vector<CounterRange>& ranges);
  Key provision_key(const std::string& tenant, const std::string& device);

 private:
  std::unique_ptr<RpcClient> rpc_;
};

}  // namespace snvme
