#include <gtest/gtest.h>

#include "snvme/error.hpp"
#include "snvme/remote_service.hpp"
#include "snvme/stack.hpp"
#include "test_util.hpp"

using namespace snvme;
using snvme::testing::TempDir;

namespace {

// A raw client session against a storage server, bypassing the local engine so
// tests can choose network counters freely.
struct Raw {
  TempDir dir;
  std::unique_ptr<SimDevice> dev;
  RemoteService service;
  std::unique_ptr<RpcServer> server;
  SessionKeys keys;
  std::unique_ptr<RpcClient> rpc;

  Raw() {
    auto g = DeviceGeometry::make(1024, 64);
    SimDevice::create(dir.file("d.img"), g);
    dev = std::make_unique<SimDevice>(dir.file("d.img"), g);
    Key kf;
    kf.fill(3);
    RemoteEngine::format(*dev, dir.file("d.nv"), kf);
    service.attach("d", std::make_shared<RemoteEngine>(*dev, dir.file("d.nv")));
    server = std::make_unique<RpcServer>(service, stack_server_credentials());
    auto [c, s] = make_pipe();
    server->serve(std::move(s));
    keys = client_handshake(*c, stack_host_credentials());
    rpc = std::make_unique<RpcClient>(std::move(c), keys.session_id);
  }
  ~Raw() { server->stop(); }

  Bytes record(std::uint64_t iv, std::uint64_t j, bool good_mac = true) {
    Bytes r(kWireRecordBytes, 0x42);
    SectorMetadata64 m;
    m.iv_counter = iv;
    m.key_id = 1;
    m.net_counter = j;
    m.net_mac = network_mac(keys.net_key, iv, j);
    if (!good_mac) m.net_mac[0] ^= 1;
    auto e = m.encode();
    std::copy(e.begin(), e.end(), r.begin() + kSectorBytes);
    return r;
  }

  Frame write(std::uint64_t start, const Bytes& records) {
    WriteMsg m{0, "d", start, records};
    return rpc->call_sync({FrameType::kWrite, encode(m), {}});
  }

  ErrorKind write_error(std::uint64_t start, const Bytes& records) {
    try {
      write(start, records);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kInvalidArgument;  // sentinel: accepted
  }
};

Bytes cat(std::initializer_list<Bytes> parts) {
  Bytes out;
  for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace

TEST(RemoteService, ReplayedWriteIsRejected) {
  Raw r;
  const auto j = r.keys.send_start;
  auto rec = r.record(1, j);
  r.write(0, rec);
  EXPECT_EQ(r.write_error(0, rec), ErrorKind::kNetworkFreshness);
  EXPECT_EQ(r.service.engine("d")->stats().writes, 1u);
}

TEST(RemoteService, WindowAcceptsLateCountersOnce) {
  Raw r;
  const auto j0 = r.keys.send_start;
  const auto T = kDefaultWindow;
  r.write(0, r.record(1, j0 + T));
  // T-1 behind the maximum is inside the window; T behind is not.
  EXPECT_EQ(r.write_error(1, r.record(2, j0 + 1)), ErrorKind::kInvalidArgument);
  EXPECT_EQ(r.write_error(2, r.record(3, j0)), ErrorKind::kNetworkFreshness);
  EXPECT_EQ(r.write_error(1, r.record(4, j0 + 1)), ErrorKind::kNetworkFreshness);
}

TEST(RemoteService, ForgedMacIsRejected) {
  Raw r;
  EXPECT_EQ(r.write_error(0, r.record(1, r.keys.send_start, false)),
            ErrorKind::kNetworkFreshness);
  // The counter was not consumed by the rejected frame.
  r.write(0, r.record(1, r.keys.send_start));
}

TEST(RemoteService, BadFrameConsumesNoCounters) {
  Raw r;
  const auto j = r.keys.send_start;
  try {
    r.write(0, cat({r.record(1, j), r.record(2, j + 1, false)}));
    FAIL();
  } catch (const SectorError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNetworkFreshness);
    EXPECT_EQ(e.sector(), 1u);
  }
  r.write(0, cat({r.record(1, j), r.record(2, j + 1)}));
  // Duplicate counters inside one frame.
  EXPECT_EQ(r.write_error(5, cat({r.record(3, j + 2), r.record(4, j + 2)})),
            ErrorKind::kNetworkFreshness);
}

TEST(RemoteService, ReadResponsesCarryIncreasingCounters) {
  Raw r;
  r.write(0, r.record(1, r.keys.send_start));
  std::uint64_t last = 0;
  for (int k = 0; k < 3; ++k) {
    auto f = r.rpc->call_sync(
        {FrameType::kRead, encode(ReadMsg{0, "d", 0, 2}), {}});
    auto m = decode_read_resp(f.body);
    for (std::uint32_t i = 0; i < 2; ++i) {
      auto meta = SectorMetadata64::decode(ByteSpan(m.records).subspan(
          i * kWireRecordBytes + kSectorBytes, 64));
      EXPECT_GT(meta.net_counter, last);
      EXPECT_GE(meta.net_counter, r.keys.recv_start);
      last = meta.net_counter;
      EXPECT_EQ(meta.net_mac,
                network_mac(r.keys.net_key, meta.iv_counter, meta.net_counter));
    }
  }
}

TEST(RemoteService, UnknownDeviceAndRecoverRefused) {
  Raw r;
  try {
    r.rpc->call_sync({FrameType::kDrain, encode(DeviceMsg{0, "nope"}), {}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNotFound);
  }
  try {
    r.rpc->call_sync({FrameType::kRecover, encode(DeviceMsg{0, "d"}), {}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
  }
}

TEST(RemoteService, RecoveryReportRoundTrip) {
  RecoveryReport rep{5, 2, 3, 4, 77, {}};
  rep.root.fill(0xab);
  auto back = decode_recovery(encode_recovery(rep));
  EXPECT_EQ(back.journal_entries, 5u);
  EXPECT_EQ(back.adopted_new, 2u);
  EXPECT_EQ(back.rolled_back, 3u);
  EXPECT_EQ(back.data_sets_rewritten, 4u);
  EXPECT_EQ(back.sectors_scanned, 77u);
  EXPECT_EQ(back.root, rep.root);
}
