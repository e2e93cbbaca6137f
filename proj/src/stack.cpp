#include "snvme/stack.hpp"

namespace snvme {

namespace {
Key stack_psk() {
  Key k;
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = static_cast<std::uint8_t>(0xa0 + i);
  return k;
}
}  // namespace

Credentials stack_host_credentials() {
  return {stack_psk(), "host-tee", "storage-server"};
}

Credentials stack_server_credentials() {
  return {stack_psk(), "storage-server", "host-tee"};
}

Stack::Stack(StackOptions opt)
    : opt_(std::move(opt)), link_(broker_, "host-tee") {
  std::filesystem::create_directories(opt_.dir);
  auto geom = DeviceGeometry::make(opt_.total_sectors, opt_.data_set_size);
  const auto dev_path = opt_.dir / (opt_.local.device + ".img");
  nv_path_ = opt_.dir / (opt_.local.device + ".nv");
  SimDevice::create(dev_path, geom);
  dev_ = std::make_unique<SimDevice>(dev_path, geom);

  Key tenant_key = digest(as_bytes("tenant:" + opt_.local.tenant));
  broker_.register_tenant(opt_.local.tenant, tenant_key);
  broker_.register_device(opt_.local.device);

  const bool fresh = opt_.remote.mode == RemoteMode::kFreshness;
  if (fresh) {
    Key k_f = digest(as_bytes("freshness:" + opt_.local.device));
    RemoteEngine::format(*dev_, nv_path_, k_f, opt_.remote.tree_branching,
                         opt_.journal_capacity, opt_.remote.suite);
  }
  auto engine = std::make_shared<RemoteEngine>(
      *dev_, fresh ? nv_path_ : std::filesystem::path{}, opt_.remote);
  service_.attach(opt_.local.device, std::move(engine), [this, fresh] {
    dev_->reopen();
    return std::make_shared<RemoteEngine>(
        *dev_, fresh ? nv_path_ : std::filesystem::path{}, opt_.remote);
  });
  // Delay applies to served traffic only, not to formatting.
  dev_->set_delay(opt_.delay);

  server_ = std::make_unique<RpcServer>(service_, stack_server_credentials(),
                                        opt_.server_workers);
  if (opt_.tcp) {
    listener_ = std::make_unique<TcpListener>(0);
    accept_thread_ = std::thread([this] { server_->serve_listener(*listener_); });
  }
  if (opt_.local.data_sectors == 0) {
    opt_.local.data_sectors = geom.data_sector_count();
  }
  opt_.local.remote_creds = stack_host_credentials();
  for (unsigned i = 0; i < opt_.sessions; ++i) {
    add_session(i == 0 ? opt_.tap : nullptr);
  }
}

Stack::~Stack() {
  try {
    close();
  } catch (const std::exception&) {
  }
}

std::unique_ptr<Connection> Stack::connect(std::shared_ptr<Tap> tap) {
  if (opt_.tcp) return tcp_connect("127.0.0.1", listener_->port());
  auto [client, server] = make_pipe(std::move(tap));
  server_->serve(std::move(server));
  return std::move(client);
}

LocalEngine& Stack::add_session(std::shared_ptr<Tap> tap, KbsLink* kbs) {
  locals_.push_back(
      std::make_unique<LocalEngine>(connect(std::move(tap)),
                                    kbs ? *kbs : link_, opt_.local));
  return *locals_.back();
}

void Stack::close() {
  if (closed_) return;
  closed_ = true;
  for (auto& l : locals_) l->shutdown();
  if (listener_) listener_->close();
  if (accept_thread_.joinable()) accept_thread_.join();
  server_->stop();
  locals_.clear();
  service_.attach(opt_.local.device, nullptr);
}

}  // namespace snvme
