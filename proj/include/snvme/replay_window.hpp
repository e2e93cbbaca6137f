#pragma once

// Sliding anti-replay window over 48-bit network counters.
//
// A counter j is accepted when it is above every counter seen so far, or
// when it is at most T-1 below the maximum and has not been seen. Counters
// below the session start are treated as already seen.

#include <cstdint>
#include <vector>

namespace snvme {

inline constexpr std::uint32_t kDefaultWindow = 1024;

class ReplayWindow {
 public:
  /// `start` is the first counter the peer will send.
  explicit ReplayWindow(std::uint64_t start = 1,
                        std::uint32_t size = kDefaultWindow);

  /// True when `accept(j)` would succeed. Does not change state.
  bool check(std::uint64_t j) const;
  /// Accepts and records j, or returns false leaving state untouched.
  bool accept(std::uint64_t j);

  std::uint64_t max_seen() const { return max_; }
  std::uint32_t size() const { return size_; }

 private:
  bool test_bit(std::uint64_t j) const;
  void set_bit(std::uint64_t j);
  void clear_bit(std::uint64_t j);

  std::uint32_t size_;
  std::uint64_t start_;
  std::uint64_t max_;  // start - 1 before anything is accepted
  std::vector<std::uint64_t> bits_;
};

}  // namespace snvme
