#include "snvme/remote_service.hpp"

namespace snvme {

Bytes encode_recovery(const RecoveryReport& r) {
  ByteWriter w;
  w.u64(r.journal_entries);
  w.u64(r.adopted_new);
  w.u64(r.rolled_back);
  w.u64(r.data_sets_rewritten);
  w.u64(r.sectors_scanned);
  w.bytes(r.root);
  return w.take();
}

RecoveryReport decode_recovery(ByteSpan in) {
  ByteReader r(in);
  RecoveryReport out;
  out.journal_entries = r.u64();
  out.adopted_new = r.u64();
  out.rolled_back = r.u64();
  out.data_sets_rewritten = r.u64();
  out.sectors_scanned = r.u64();
  auto root = r.bytes(out.root.size());
  std::copy(root.begin(), root.end(), out.root.begin());
  if (!r.done()) throw Error(ErrorKind::kProtocol, "trailing recovery bytes");
  return out;
}

void RemoteService::attach(const std::string& device,
                           std::shared_ptr<RemoteEngine> engine,
                           Reopen reopen) {
  auto s = std::make_unique<Slot>();
  s->engine = std::move(engine);
  s->reopen = std::move(reopen);
  std::lock_guard lk(mu_);
  slots_[device] = std::move(s);
}

RemoteService::Slot& RemoteService::slot(const std::string& device) const {
  std::lock_guard lk(mu_);
  auto it = slots_.find(device);
  if (it == slots_.end()) {
    throw Error(ErrorKind::kNotFound, "unknown device '" + device + "'");
  }
  return *it->second;
}

std::shared_ptr<RemoteEngine> RemoteService::engine(
    const std::string& device) const {
  auto& s = slot(device);
  std::shared_lock lk(s.mu);
  return s.engine;
}

void RemoteService::admit(ServerSession& s, const Frame& f) {
  if (f.type != FrameType::kWrite) return;
  auto m = decode_write(f.body);
  admit_records(m.records, m.start, s.keys.net_key, s.recv_window);
}

Outgoing RemoteService::handle(ServerSession& s, const Frame& f) {
  switch (f.type) {
    case FrameType::kWrite: {
      auto m = decode_write(f.body);
      auto& sl = slot(m.device);
      std::shared_lock lk(sl.mu);
      if (!sl.engine) throw Error(ErrorKind::kDevice, "device is offline");
      sl.engine->write(m.start, m.records);
      return make_ack(m.request_id);
    }
    case FrameType::kRead: {
      auto m = decode_read(f.body);
      auto& sl = slot(m.device);
      ReadRespMsg resp{m.request_id, {}};
      {
        std::shared_lock lk(sl.mu);
        if (!sl.engine) throw Error(ErrorKind::kDevice, "device is offline");
        resp.records = sl.engine->read(m.start, m.count);
      }
      Outgoing out{FrameType::kReadResp, encode(resp), {}};
      out.stamp = [&s](Bytes& body) {
        // request id, then the u32 record count
        stamp_records(MutableByteSpan(body).subspan(12), s.keys.net_key,
                      s.next_send);
      };
      return out;
    }
    case FrameType::kDrain: {
      auto m = decode_device(f.body);
      auto& sl = slot(m.device);
      std::shared_lock lk(sl.mu);
      if (!sl.engine) throw Error(ErrorKind::kDevice, "device is offline");
      sl.engine->drain();
      return make_ack(m.request_id);
    }
    case FrameType::kRecover: {
      auto m = decode_device(f.body);
      auto& sl = slot(m.device);
      std::unique_lock lk(sl.mu);
      if (!sl.reopen) {
        throw Error(ErrorKind::kInvalidArgument,
                    "device '" + m.device + "' cannot be reopened");
      }
      if (sl.engine) {
        sl.engine->halt();
        sl.engine.reset();
      }
      sl.engine = sl.reopen();
      return make_ack(m.request_id,
                      encode_recovery(sl.engine->recovery_report()));
    }
    default:
      throw Error(ErrorKind::kProtocol, std::string("storage server does not "
                                                    "handle ") +
                                            to_string(f.type));
  }
}

}  // namespace snvme
