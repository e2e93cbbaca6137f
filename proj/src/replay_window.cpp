#include "snvme/replay_window.hpp"

#include "snvme/error.hpp"
#include "snvme/layout.hpp"

namespace snvme {

ReplayWindow::ReplayWindow(std::uint64_t start, std::uint32_t size)
    : size_(size), start_(start), max_(start - 1), bits_((size + 63) / 64) {
  if (size == 0) throw Error(ErrorKind::kInvalidArgument, "empty window");
  if (start == 0 || start >= kNetCounterLimit) {
    throw Error(ErrorKind::kInvalidArgument, "window start out of range");
  }
}

bool ReplayWindow::test_bit(std::uint64_t j) const {
  auto b = j % size_;
  return (bits_[b / 64] >> (b % 64)) & 1;
}

void ReplayWindow::set_bit(std::uint64_t j) {
  auto b = j % size_;
  bits_[b / 64] |= std::uint64_t{1} << (b % 64);
}

void ReplayWindow::clear_bit(std::uint64_t j) {
  auto b = j % size_;
  bits_[b / 64] &= ~(std::uint64_t{1} << (b % 64));
}

bool ReplayWindow::check(std::uint64_t j) const {
  if (j >= kNetCounterLimit || j < start_) return false;
  if (j > max_) return true;
  if (max_ - j >= size_) return false;
  return !test_bit(j);
}

bool ReplayWindow::accept(std::uint64_t j) {
  if (!check(j)) return false;
  if (j > max_) {
    if (j - max_ >= size_) {
      std::fill(bits_.begin(), bits_.end(), 0);
    } else {
      for (auto k = max_ + 1; k < j; ++k) clear_bit(k);
    }
    max_ = j;
  }
  set_bit(j);
  return true;
}

}  // namespace snvme
