#include "snvme/kbs_service.hpp"

namespace snvme {

Outgoing KbsService::handle(ServerSession& s, const Frame& f) {
  switch (f.type) {
    case FrameType::kRegisterDevice: {
      auto m = decode_device(f.body);
      broker_.register_device(m.device);
      return make_ack(m.request_id);
    }
    case FrameType::kLease: {
      auto m = decode_lease(f.body);
      std::vector<CounterRange> ranges;
      for (auto& lr : broker_.lease_counters(m.device, m.lessee, m.units)) {
        ranges.push_back(lr.range);
      }
      return make_ack(m.request_id, encode_ranges(ranges));
    }
    case FrameType::kReturn: {
      auto m = decode_return(f.body);
      broker_.return_counters(m.device, m.lessee, m.ranges);
      return make_ack(m.request_id);
    }
    case FrameType::kKey: {
      auto m = decode_key(f.body);
      auto k = broker_.provision_tenant_keys(s.auth, m.tenant, m.device);
      return make_ack(m.request_id, Bytes(k.begin(), k.end()));
    }
    default:
      throw Error(ErrorKind::kProtocol,
                  std::string("key broker does not handle ") +
                      to_string(f.type));
  }
}

KbsClient::KbsClient(std::unique_ptr<Connection> conn,
                     const Credentials& creds) {
  auto keys = client_handshake(*conn, creds);
  rpc_ = std::make_unique<RpcClient>(std::move(conn), keys.session_id);
}

void KbsClient::register_device(const std::string& device) {
  rpc_->call_sync({FrameType::kRegisterDevice, encode(DeviceMsg{0, device}), {}});
}

std::vector<CounterRange> KbsClient::lease(const std::string& device,
                                           const std::string& lessee,
                                           std::uint64_t units) {
  auto f = rpc_->call_sync(
      {FrameType::kLease, encode(LeaseMsg{0, device, lessee, units}), {}});
  return decode_ranges(decode_ack(f.body).payload);
}

void KbsClient::give_back(const std::string& device, const std::string& lessee,
                          const std::vector<CounterRange>& ranges) {
  rpc_->call_sync(
      {FrameType::kReturn, encode(ReturnMsg{0, device, lessee, ranges}), {}});
}

Key KbsClient::provision_key(const std::string& tenant,
                             const std::string& device) {
  auto f = rpc_->call_sync(
      {FrameType::kKey, encode(KeyMsg{0, tenant, device}), {}});
  auto payload = decode_ack(f.body).payload;
  if (payload.size() != 32) {
    throw Error(ErrorKind::kProtocol, "bad KEY response length");
  }
  Key k;
  std::copy(payload.begin(), payload.end(), k.begin());
  return k;
}

}  // namespace snvme
