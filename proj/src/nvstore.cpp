#include "snvme/nvstore.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fcntl.h>
#include <unistd.h>

#include "snvme/error.hpp"

namespace snvme {

namespace {

constexpr char kNvMagic[8] = {'s', 'N', 'V', 'M', 'e', 'N', 'V', '1'};
constexpr std::size_t kNvHeaderBytes = 72;
constexpr std::size_t kNvChecksumBytes = 32;

[[noreturn]] void corrupt(const std::string& why) {
  throw Error(ErrorKind::kFreshnessViolation, "nv store: " + why);
}

Bytes read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::kNotFound, "cannot open " + p.string());
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

void write_atomic(const std::filesystem::path& p, ByteSpan data) {
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
    if (!out) throw Error(ErrorKind::kDevice, "cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

// Newest valid image of the two slots.
NvImage load_slots(ByteSpan file) {
  if (file.size() < 2 * (kNvHeaderBytes + kNvChecksumBytes) ||
      file.size() % 2 != 0) {
    corrupt("truncated");
  }
  const auto half = file.size() / 2;
  std::optional<NvImage> best;
  std::string why = "no valid image";
  for (int slot = 0; slot < 2; ++slot) {
    auto bytes = file.subspan(slot * half, half);
    if (all_zero(bytes)) continue;
    NvImage img;
    try {
      img = NvImage::decode(bytes);
    } catch (const Error& e) {
      why = e.what();
      continue;
    }
    if (img.commit_seq % 2 != static_cast<std::uint64_t>(slot) &&
        !(slot == 0 && img.commit_seq == 0)) {
      corrupt("image in the wrong slot");
    }
    if (best && (best->freshness_key != img.freshness_key ||
                 best->entries.size() != img.entries.size())) {
      corrupt("slots disagree on fixed fields");
    }
    if (!best || img.commit_seq > best->commit_seq) best = std::move(img);
  }
  if (!best) corrupt(why);
  return std::move(*best);
}

}  // namespace

const char* to_string(JournalStatus s) noexcept {
  switch (s) {
    case JournalStatus::kRetired: return "RETIRED";
    case JournalStatus::kPending: return "PENDING";
    case JournalStatus::kDataPersisted: return "DATA_PERSISTED";
    case JournalStatus::kTreeUpdated: return "TREE_UPDATED";
  }
  return "?";
}

ByteArray<kJournalEntryBytes> JournalEntry::encode() const {
  ByteArray<kJournalEntryBytes> out{};
  store_le(std::span(out).subspan(0, 8), sector, 8);
  store_le(std::span(out).subspan(8, 8), old_iv, 8);
  store_le(std::span(out).subspan(16, 8), new_iv, 8);
  store_le(std::span(out).subspan(24, 4), key_id, 4);
  out[28] = static_cast<std::uint8_t>(status);
  out[29] = flags;
  return out;
}

JournalEntry JournalEntry::decode(ByteSpan in) {
  if (in.size() != kJournalEntryBytes) corrupt("entry size");
  JournalEntry e;
  e.sector = load_le(in.subspan(0), 8);
  e.old_iv = load_le(in.subspan(8), 8);
  e.new_iv = load_le(in.subspan(16), 8);
  e.key_id = static_cast<std::uint32_t>(load_le(in.subspan(24), 4));
  if (in[28] > 3) corrupt("entry status");
  e.status = static_cast<JournalStatus>(in[28]);
  e.flags = in[29];
  if ((e.flags & ~kEntryFlushed) != 0 || in[30] != 0 || in[31] != 0) {
    corrupt("entry reserved bits");
  }
  return e;
}

Bytes NvImage::encode() const {
  ByteWriter w;
  w.bytes(as_bytes(std::string_view(kNvMagic, 8)));
  w.u64(commit_seq);
  w.bytes(root);
  w.bytes(freshness_key);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  w.u32(0);
  for (const auto& e : entries) w.bytes(e.encode());
  auto sum = digest(w.buffer());
  w.bytes(sum);
  return w.take();
}

std::size_t NvImage::encoded_size(std::uint32_t capacity) {
  return kNvHeaderBytes + std::size_t{capacity} * kJournalEntryBytes +
         kNvChecksumBytes;
}

NvImage NvImage::decode(ByteSpan in) {
  if (in.size() < kNvHeaderBytes + kNvChecksumBytes) corrupt("truncated");
  auto body = in.first(in.size() - kNvChecksumBytes);
  auto sum = digest(body);
  if (!constant_time_equal(sum, in.last(kNvChecksumBytes))) corrupt("checksum");
  if (std::memcmp(in.data(), kNvMagic, 8) != 0) corrupt("magic");
  ByteReader r(body.subspan(8));
  NvImage img;
  img.commit_seq = r.u64();
  auto root = r.bytes(16);
  std::copy(root.begin(), root.end(), img.root.begin());
  auto key = r.bytes(32);
  std::copy(key.begin(), key.end(), img.freshness_key.begin());
  auto cap = r.u32();
  if (r.u32() != 0) corrupt("reserved header bytes");
  if (r.remaining() != std::size_t{cap} * kJournalEntryBytes) corrupt("size");
  img.entries.reserve(cap);
  for (std::uint32_t i = 0; i < cap; ++i) {
    img.entries.push_back(JournalEntry::decode(r.bytes(kJournalEntryBytes)));
  }
  return img;
}

void NvStore::create(const std::filesystem::path& path,
                     const Key& freshness_key, const Node& root,
                     std::uint32_t capacity) {
  if (capacity == 0) {
    throw Error(ErrorKind::kInvalidArgument, "journal capacity must be > 0");
  }
  NvImage img;
  img.root = root;
  img.freshness_key = freshness_key;
  img.entries.resize(capacity);
  Bytes file = img.encode();
  file.resize(2 * file.size(), 0);  // slot 1 starts empty
  write_atomic(path, file);
}

NvStore::NvStore(std::filesystem::path path, std::shared_ptr<CrashSwitch> crash)
    : path_(std::move(path)),
      crash_(crash ? std::move(crash) : std::make_shared<CrashSwitch>()) {
  image_ = load_slots(read_file(path_));
  freshness_key_ = image_.freshness_key;
  capacity_ = static_cast<std::uint32_t>(image_.entries.size());
  fd_ = ::open(path_.c_str(), O_RDWR | O_CLOEXEC);
  if (fd_ < 0) throw Error(ErrorKind::kNotFound, "cannot open " + path_.string());
}

NvStore::~NvStore() {
  if (fd_ >= 0) ::close(fd_);
}

NvImage NvStore::image() const {
  std::lock_guard lk(mu_);
  return image_;
}

void NvStore::commit(const std::function<void(NvImage&)>& edit) {
  std::lock_guard lk(mu_);
  if (crash_budget_) {
    if (*crash_budget_ == 0) {
      crash_budget_.reset();
      crash_->trip();
    } else {
      --*crash_budget_;
    }
  }
  if (crash_->crashed()) {
    throw Error(ErrorKind::kDeviceCrashed, "nv store lost power");
  }
  NvImage next = image_;
  edit(next);
  if (next.entries.size() != capacity_ ||
      next.freshness_key != freshness_key_) {
    throw Error(ErrorKind::kInvalidArgument, "nv commit changed fixed fields");
  }
  next.commit_seq = image_.commit_seq + 1;
  // The slot not holding the current image.
  auto bytes = next.encode();
  const auto base = (next.commit_seq % 2) * bytes.size();
  std::size_t done = 0;
  while (done < bytes.size()) {
    auto n = ::pwrite(fd_, bytes.data() + done, bytes.size() - done,
                      static_cast<off_t>(base + done));
    if (n <= 0) throw Error(ErrorKind::kDevice, "cannot write " + path_.string());
    done += static_cast<std::size_t>(n);
  }
  image_ = std::move(next);
  ++commits_;
}

void NvStore::schedule_crash(std::uint64_t n) {
  std::lock_guard lk(mu_);
  crash_budget_ = n;
}

void NvStore::cancel_crash() {
  std::lock_guard lk(mu_);
  crash_budget_.reset();
}

std::uint64_t NvStore::commits() const {
  std::lock_guard lk(mu_);
  return commits_;
}

// ---- Journal ----------------------------------------------------------------

Journal::Journal(NvStore& nv, RetireHook on_retire)
    : nv_(nv), on_retire_(std::move(on_retire)) {
  slots_.resize(nv_.capacity());
  auto img = nv_.image();
  for (std::uint32_t i = 0; i < slots_.size(); ++i) {
    if (img.entries[i].status != JournalStatus::kRetired) {
      throw Error(ErrorKind::kInvalidArgument,
                  "journal has live entries; recover first");
    }
  }
}

std::uint32_t Journal::in_use() const {
  std::lock_guard lk(mu_);
  return used_;
}

std::size_t Journal::live() const {
  std::lock_guard lk(mu_);
  return by_seq_.size();
}

bool Journal::wait_empty(std::chrono::milliseconds timeout) {
  std::unique_lock lk(mu_);
  return cv_.wait_for(lk, timeout, [&] { return by_seq_.empty(); });
}

std::vector<std::uint32_t> Journal::reserve(
    std::size_t n, const std::function<void()>& starved) {
  if (n > slots_.size()) {
    throw Error(ErrorKind::kJournalFull,
                "request needs " + std::to_string(n) + " journal slots, have " +
                    std::to_string(slots_.size()));
  }
  std::unique_lock lk(mu_);
  while (slots_.size() - used_ < n) {
    if (starved) {
      lk.unlock();
      starved();
      lk.lock();
      if (slots_.size() - used_ >= n) break;
    }
    cv_.wait_for(lk, std::chrono::milliseconds(2));
  }
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = 0; i < slots_.size() && out.size() < n; ++i) {
    if (slots_[i].seq == 0 && !slots_[i].reserved) {
      slots_[i].reserved = true;
      out.push_back(i);
    }
  }
  used_ += static_cast<std::uint32_t>(n);
  return out;
}

void Journal::release(std::span<const std::uint32_t> slots) {
  {
    std::lock_guard lk(mu_);
    for (auto i : slots) {
      if (slots_[i].reserved && slots_[i].seq == 0) {
        slots_[i].reserved = false;
        --used_;
      }
    }
  }
  cv_.notify_all();
}

std::optional<std::uint32_t> Journal::slot_of(std::uint64_t seq) const {
  auto it = by_seq_.find(seq);
  if (it == by_seq_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::uint64_t> Journal::begin(std::span<const std::uint32_t> slots,
                                          std::span<const JournalEntry> entries) {
  if (slots.size() != entries.size()) {
    throw Error(ErrorKind::kInvalidArgument, "slot/entry count mismatch");
  }
  std::lock_guard lk(mu_);
  nv_.commit([&](NvImage& img) {
    for (std::size_t k = 0; k < slots.size(); ++k) {
      auto e = entries[k];
      e.status = JournalStatus::kPending;
      e.flags = 0;
      img.entries[slots[k]] = e;
    }
  });
  std::vector<std::uint64_t> seqs;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    auto& s = slots_[slots[k]];
    s.reserved = false;
    s.seq = next_seq_++;
    s.e = entries[k];
    s.e.status = JournalStatus::kPending;
    s.e.flags = 0;
    by_seq_[s.seq] = slots[k];
    seqs.push_back(s.seq);
  }
  return seqs;
}

void Journal::mark_persisted(std::span<const std::uint64_t> seqs) {
  std::lock_guard lk(mu_);
  std::vector<std::uint32_t> touched;
  for (auto q : seqs) {
    auto i = slot_of(q);
    if (!i) throw Error(ErrorKind::kInvalidArgument, "unknown journal seq");
    touched.push_back(*i);
  }
  nv_.commit([&](NvImage& img) {
    for (auto i : touched) img.entries[i].status = JournalStatus::kDataPersisted;
  });
  for (auto i : touched) slots_[i].e.status = JournalStatus::kDataPersisted;
}

void Journal::retire_done(NvImage& img, std::vector<std::uint64_t>& retired,
                          std::span<const std::uint32_t> touched) {
  for (auto i : touched) {
    auto& e = img.entries[i];
    if (e.status == JournalStatus::kTreeUpdated && e.flushed()) {
      retired.push_back(i);
      e = JournalEntry{};
    }
  }
}

void Journal::commit_root(const Node& root, std::span<const std::uint64_t> seqs) {
  std::vector<std::uint64_t> retired_slots;
  std::vector<std::uint64_t> retired_sectors;
  {
    std::lock_guard lk(mu_);
    std::vector<std::uint32_t> touched;
    for (auto q : seqs) {
      if (auto i = slot_of(q);
          i && slots_[*i].e.status == JournalStatus::kDataPersisted) {
        touched.push_back(*i);
      }
    }
    nv_.commit([&](NvImage& img) {
      retired_slots.clear();
      img.root = root;
      for (auto i : touched) img.entries[i].status = JournalStatus::kTreeUpdated;
      retire_done(img, retired_slots, touched);
    });
    for (auto i : touched) slots_[i].e.status = JournalStatus::kTreeUpdated;
    for (auto i : retired_slots) {
      auto& s = slots_[i];
      retired_sectors.push_back(s.e.sector);
      by_seq_.erase(s.seq);
      s = Slot{};
      --used_;
    }
  }
  if (!retired_sectors.empty()) cv_.notify_all();
  for (auto sec : retired_sectors) {
    if (on_retire_) on_retire_(sec);
  }
}

void Journal::mark_flushed(std::span<const std::uint64_t> seqs) {
  std::vector<std::uint64_t> retired_slots;
  std::vector<std::uint64_t> retired_sectors;
  {
    std::lock_guard lk(mu_);
    std::vector<std::uint32_t> touched;
    for (auto q : seqs) {
      if (auto i = slot_of(q); i && !slots_[*i].e.flushed()) {
        touched.push_back(*i);
      }
    }
    if (touched.empty()) return;
    nv_.commit([&](NvImage& img) {
      retired_slots.clear();
      for (auto i : touched) img.entries[i].flags |= kEntryFlushed;
      retire_done(img, retired_slots, touched);
    });
    for (auto i : touched) slots_[i].e.flags |= kEntryFlushed;
    for (auto i : retired_slots) {
      auto& s = slots_[i];
      retired_sectors.push_back(s.e.sector);
      by_seq_.erase(s.seq);
      s = Slot{};
      --used_;
    }
  }
  if (!retired_sectors.empty()) cv_.notify_all();
  for (auto sec : retired_sectors) {
    if (on_retire_) on_retire_(sec);
  }
}

void Journal::filter_uncommitted(std::vector<std::uint64_t>& seqs) const {
  std::lock_guard lk(mu_);
  std::erase_if(seqs, [&](std::uint64_t q) {
    auto i = slot_of(q);
    return !i || slots_[*i].e.status >= JournalStatus::kTreeUpdated;
  });
}

}  // namespace snvme
