#include "snvme/bytes.hpp"

#include "snvme/error.hpp"

namespace snvme {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kGeometry: return "geometry";
    case ErrorKind::kOutOfRange: return "out-of-range";
    case ErrorKind::kIntegrity: return "integrity-error";
    case ErrorKind::kFreshness: return "freshness-error";
    case ErrorKind::kNetworkFreshness: return "network-freshness-error";
    case ErrorKind::kFreshnessViolation: return "freshness-violation";
    case ErrorKind::kCounterExhausted: return "counter-exhausted";
    case ErrorKind::kLedger: return "ledger";
    case ErrorKind::kAuth: return "auth";
    case ErrorKind::kProtocol: return "protocol";
    case ErrorKind::kTransport: return "transport";
    case ErrorKind::kDevice: return "device";
    case ErrorKind::kDeviceCrashed: return "device-crashed";
    case ErrorKind::kJournalFull: return "journal-full";
    case ErrorKind::kNotFound: return "not-found";
    case ErrorKind::kConfig: return "config";
  }
  return "unknown";
}

std::string to_hex(ByteSpan in) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(in.size() * 2);
  for (auto b : in) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xf]);
  }
  return out;
}

namespace {
int nibble(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}
}  // namespace

Bytes from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) {
    throw Error(ErrorKind::kInvalidArgument, "odd-length hex string");
  }
  Bytes out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int hi = nibble(hex[2 * i]);
    int lo = nibble(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) {
      throw Error(ErrorKind::kInvalidArgument, "bad hex digit");
    }
    out[i] = static_cast<std::uint8_t>(hi << 4 | lo);
  }
  return out;
}

ByteSpan ByteReader::bytes(std::size_t n) {
  if (remaining() < n) {
    throw Error(ErrorKind::kProtocol, "truncated field");
  }
  auto out = in_.subspan(pos_, n);
  pos_ += n;
  return out;
}

std::string ByteReader::str() {
  auto n = u16();
  auto b = bytes(n);
  return {b.begin(), b.end()};
}

std::uint64_t ByteReader::get(std::size_t width) {
  if (remaining() < width) {
    throw Error(ErrorKind::kProtocol, "truncated field");
  }
  auto v = load_le(in_.subspan(pos_, width), width);
  pos_ += width;
  return v;
}

}  // namespace snvme
