#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace snvme {

enum class ErrorKind : std::uint8_t {
  kInvalidArgument = 1,
  kGeometry,
  kOutOfRange,
  kIntegrity,         // AEAD authentication failed
  kFreshness,         // tree / IV mismatch on the remote side
  kNetworkFreshness,  // net MAC or replay-window rejection
  kFreshnessViolation,  // recovery found state that the trusted root does not cover
  kCounterExhausted,
  kLedger,
  kAuth,
  kProtocol,
  kTransport,
  kDevice,
  kDeviceCrashed,
  kJournalFull,
  kNotFound,
  kConfig,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Raised when a sector fails verification. Carries the data-sector index.
class SectorError : public Error {
 public:
  SectorError(ErrorKind kind, std::uint64_t sector, const std::string& what)
      : Error(kind, what + " (sector " + std::to_string(sector) + ")"),
        sector_(sector) {}

  std::uint64_t sector() const noexcept { return sector_; }

 private:
  std::uint64_t sector_;
};

}  // namespace snvme
