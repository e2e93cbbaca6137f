#include "snvme/remote_engine.hpp"

#include <algorithm>
#include <map>

#include "snvme/error.hpp"

namespace snvme {

namespace {

constexpr std::size_t kMetaOffset = kSectorBytes;

[[noreturn]] void violation(const std::string& why) {
  throw Error(ErrorKind::kFreshnessViolation, "recovery: " + why);
}

Bytes aggregated_record(std::uint64_t ds, std::vector<std::uint64_t> ivs,
                        std::uint32_t record_bytes) {
  MetadataSector m{ds, std::move(ivs)};
  auto sector = m.encode(kSectorBytes);
  sector.resize(record_bytes, 0);
  return sector;
}

SectorMetadata64 meta_of(ByteSpan record) {
  return SectorMetadata64::decode(record.subspan(kMetaOffset, 64));
}

void put_meta(MutableByteSpan record, const SectorMetadata64& m) {
  auto enc = m.encode();
  std::copy(enc.begin(), enc.end(), record.begin() + kMetaOffset);
}

}  // namespace

// ---- busy-sector table -------------------------------------------------------

void RemoteEngine::BusyTable::acquire(
    std::span<const std::uint64_t> sectors,
    const std::function<void(std::uint64_t)>& waiting) {
  for (auto s : sectors) {
    std::unique_lock lk(mu_);
    while (busy_.count(s)) {
      lk.unlock();
      waiting(s);
      lk.lock();
      if (!busy_.count(s)) break;
      cv_.wait_for(lk, std::chrono::milliseconds(1));
    }
    busy_.insert(s);
  }
}

void RemoteEngine::BusyTable::release(std::uint64_t sector) {
  {
    std::lock_guard lk(mu_);
    busy_.erase(sector);
  }
  cv_.notify_all();
}

void RemoteEngine::BusyTable::release_all(
    std::span<const std::uint64_t> sectors) {
  {
    std::lock_guard lk(mu_);
    for (auto s : sectors) busy_.erase(s);
  }
  cv_.notify_all();
}

// ---- construction -------------------------------------------------------------

void RemoteEngine::format(SimDevice& dev, const std::filesystem::path& nv_path,
                          const Key& freshness_key,
                          std::uint32_t tree_branching,
                          std::uint32_t journal_capacity,
                          const CipherSuite& suite) {
  const auto& g = dev.geometry();
  std::vector<std::uint64_t> zeros(g.data_set_size(), 0);
  auto leaf = node_hash(zeros, g.data_set_size(), suite);
  std::vector<Node> level1(g.data_set_count(), leaf);
  auto levels = build_tree(std::move(level1), tree_branching, suite);
  NvStore::create(nv_path, freshness_key, levels.back()[0], journal_capacity);
}

RemoteEngine::RemoteEngine(SimDevice& dev, const std::filesystem::path& nv_path,
                           RemoteConfig cfg)
    : dev_(dev), geom_(dev.geometry()), cfg_(cfg) {
  if (cfg_.mode == RemoteMode::kStore) return;
  if (geom_.metadata_bytes() != kMetadataBytes64) {
    throw Error(ErrorKind::kGeometry,
                "freshness mode needs 64-byte sector metadata");
  }
  if (cfg_.hashers == 0) cfg_.hashers = 1;
  ds_locks_ = std::make_unique<std::shared_mutex[]>(kStripes);
  nv_ = std::make_unique<NvStore>(nv_path, dev_.crash_switch());
  fkey_ = nv_->freshness_key();

  recover_state();

  journal_ = std::make_unique<Journal>(
      *nv_, [this](std::uint64_t sector) { busy_.release(sector); });
  cache_ = std::make_unique<IvCache>(
      cfg_.cache_lines, [this](std::uint64_t ds) { return load_line(ds); },
      [this](IvLine& l) { flush_line(l); });

  if (cfg_.eventual_consistency) {
    hq_.resize(cfg_.hashers);
    hq_cv_ = std::make_unique<std::condition_variable[]>(cfg_.hashers);
    for (unsigned i = 0; i < cfg_.hashers; ++i) {
      threads_.emplace_back([this, i] { hasher_loop(i); });
    }
  }
  threads_.emplace_back([this] { flusher_loop(); });
}

RemoteEngine::~RemoteEngine() {
  if (cfg_.mode == RemoteMode::kFreshness && !stopping_ && !failed_ &&
      !dev_.crashed()) {
    try {
      drain();
    } catch (...) {
    }
  }
  halt();
}

void RemoteEngine::halt() {
  stopping_ = true;
  {
    std::lock_guard lk(hq_mu_);
    for (std::size_t i = 0; i < hq_.size(); ++i) hq_cv_[i].notify_all();
  }
  idle_cv_.notify_all();
  fl_cv_.notify_all();
  for (auto& t : threads_) {
    if (t.joinable()) t.join();
  }
  threads_.clear();
}

void RemoteEngine::check_alive() const {
  if (failed_ || dev_.crashed()) {
    throw Error(ErrorKind::kDeviceCrashed, "remote engine is down");
  }
  if (stopping_) throw Error(ErrorKind::kDevice, "remote engine halted");
}

// ---- recovery -----------------------------------------------------------------

void RemoteEngine::recover_state() {
  const auto img = nv_->image();
  const auto D = geom_.data_set_count();
  const auto S = geom_.data_set_size();
  const auto rb = geom_.record_bytes();

  std::vector<std::vector<std::uint64_t>> disk(D);
  constexpr std::uint64_t kChunk = 256;
  for (std::uint64_t base = 0; base < D; base += kChunk) {
    auto n = std::min(kChunk, D - base);
    auto recs = dev_.read_sectors(base, n);
    for (std::uint64_t k = 0; k < n; ++k) {
      auto ds = base + k;
      ByteSpan rec(recs.data() + k * rb, rb);
      if (!all_zero(rec.subspan(kSectorBytes))) {
        violation("aggregated sector " + std::to_string(ds) +
                  " carries metadata");
      }
      try {
        disk[ds] = MetadataSector::decode(rec.first(kSectorBytes), ds, S).ivs;
      } catch (const Error& e) {
        violation("aggregated sector " + std::to_string(ds) + ": " + e.what());
      }
      for (auto off = geom_.data_set_population(ds); off < S; ++off) {
        if (disk[ds][off] != 0) {
          violation("aggregated sector " + std::to_string(ds) +
                    " has IVs past the device end");
        }
      }
    }
  }

  auto state = disk;
  std::map<std::uint64_t, std::uint64_t> reverted;  // sector -> old iv
  std::unordered_set<std::uint64_t> seen;
  for (const auto& e : img.entries) {
    if (e.status == JournalStatus::kRetired) continue;
    ++report_.journal_entries;
    if (e.sector >= geom_.data_sector_count()) {
      violation("journal entry for sector " + std::to_string(e.sector) +
                " is out of range");
    }
    if (!seen.insert(e.sector).second) {
      violation("two live journal entries for sector " +
                std::to_string(e.sector));
    }
    auto rec = dev_.read_sectors(geom_.data_to_physical(e.sector), 1);
    std::uint64_t iv;
    try {
      iv = meta_of(rec).iv_counter;
    } catch (const Error& err) {
      violation("sector " + std::to_string(e.sector) + ": " + err.what());
    }
    if (e.status >= JournalStatus::kDataPersisted) {
      if (iv != e.new_iv) {
        violation("sector " + std::to_string(e.sector) +
                  " lost an acknowledged write");
      }
    } else if (iv != e.old_iv && iv != e.new_iv) {
      violation("sector " + std::to_string(e.sector) +
                " holds an IV the journal does not know");
    } else if (iv == e.new_iv && e.new_iv != e.old_iv) {
      ++report_.adopted_new;
    } else {
      ++report_.rolled_back;
    }
    auto loc = geom_.metadata_location(e.sector);
    state[loc.sector][loc.offset] = iv;
    if (e.status < JournalStatus::kTreeUpdated) reverted[e.sector] = e.old_iv;
  }

  std::vector<Node> level1(D);
  for (std::uint64_t ds = 0; ds < D; ++ds) {
    level1[ds] = node_hash(state[ds], S, cfg_.suite);
  }
  auto scratch = level1;
  if (!reverted.empty()) {
    std::map<std::uint64_t, std::vector<std::uint64_t>> patched;
    for (auto [sector, old] : reverted) {
      auto loc = geom_.metadata_location(sector);
      auto [it, _] = patched.try_emplace(loc.sector, state[loc.sector]);
      it->second[loc.offset] = old;
    }
    for (auto& [ds, ivs] : patched) scratch[ds] = node_hash(ivs, S, cfg_.suite);
  }
  auto scratch_root = build_tree(scratch, cfg_.tree_branching, cfg_.suite)
                          .back()[0];
  if (!constant_time_equal(scratch_root, img.root)) {
    violation("device state does not match the persisted root");
  }

  if (cfg_.deep_scan) {
    constexpr std::uint64_t kScan = 340;
    for (std::uint64_t s0 = 0; s0 < geom_.data_sector_count(); s0 += kScan) {
      auto n = std::min(kScan, geom_.data_sector_count() - s0);
      auto recs = dev_.read_sectors(geom_.data_to_physical(s0), n);
      for (std::uint64_t k = 0; k < n; ++k) {
        auto sector = s0 + k;
        ByteSpan rec(recs.data() + k * rb, rb);
        auto loc = geom_.metadata_location(sector);
        auto want = state[loc.sector][loc.offset];
        std::uint64_t iv;
        try {
          auto m = meta_of(rec);
          iv = m.iv_counter;
          if (iv == 0 && !(m.unwritten() && all_zero(rec.first(kSectorBytes)))) {
            violation("sector " + std::to_string(sector) +
                      " is neither written nor blank");
          }
        } catch (const Error& err) {
          if (err.kind() == ErrorKind::kFreshnessViolation) throw;
          violation("sector " + std::to_string(sector) + ": " + err.what());
        }
        if (iv != want) {
          violation("sector " + std::to_string(sector) +
                    " disagrees with its aggregated IV");
        }
      }
      report_.sectors_scanned += n;
    }
  }

  tree_ = std::make_unique<HazelMerkleTree>(level1, cfg_.tree_branching,
                                            cfg_.suite);
  auto root = tree_->root();
  if (report_.journal_entries > 0) {
    for (std::uint64_t ds = 0; ds < D; ++ds) {
      if (state[ds] != disk[ds]) {
        dev_.write_sectors(ds, aggregated_record(ds, state[ds], rb));
        ++report_.data_sets_rewritten;
      }
    }
    nv_->commit([&](NvImage& i) {
      i.root = root;
      for (auto& e : i.entries) e = JournalEntry{};
    });
  } else if (!constant_time_equal(root, img.root)) {
    violation("device state does not match the persisted root");
  }
  last_root_ = root;
  report_.root = root;
}

// ---- cache lines --------------------------------------------------------------

std::shared_ptr<IvLine> RemoteEngine::load_line(std::uint64_t ds) {
  const auto S = geom_.data_set_size();
  auto rec = dev_.read_sectors(ds, 1);
  auto first = geom_.first_sector_of(ds);
  auto stale = [&](const std::string& why) {
    ++fresh_err_;
    throw SectorError(ErrorKind::kFreshness, first,
                      "aggregated IV sector " + std::to_string(ds) + " " + why);
  };
  if (!all_zero(ByteSpan(rec).subspan(kSectorBytes))) stale("carries metadata");
  std::vector<std::uint64_t> ivs;
  try {
    ivs = MetadataSector::decode(ByteSpan(rec).first(kSectorBytes), ds, S).ivs;
  } catch (const Error& e) {
    stale(std::string("is malformed: ") + e.what());
  }
  auto h = node_hash(ivs, S, cfg_.suite);
  if (!constant_time_equal(h, tree_->level1(ds))) {
    stale("does not match the tree");
  }
  return std::make_shared<IvLine>(ds, std::move(ivs), h);
}

void RemoteEngine::flush_line(IvLine& line) {
  std::lock_guard fl(line.flush_mu);
  std::vector<std::uint64_t> ivs, seqs;
  {
    std::lock_guard lk(line.mu);
    if (!line.dirty) return;
    ivs = line.ivs;
    seqs.swap(line.unflushed);
    line.dirty = false;
  }
  try {
    dev_.write_sectors(line.ds,
                       aggregated_record(line.ds, std::move(ivs),
                                         geom_.record_bytes()));
    journal_->mark_flushed(seqs);
  } catch (...) {
    failed_ = true;
    throw;
  }
  ++flushes_;
}

void RemoteEngine::flush_lines(std::vector<std::shared_ptr<IvLine>> lines) {
  std::sort(lines.begin(), lines.end(),
            [](const auto& a, const auto& b) { return a->ds < b->ds; });
  std::vector<std::unique_lock<std::mutex>> held;
  std::vector<std::uint64_t> dss, seqs;
  Bytes recs;
  const auto rb = geom_.record_bytes();
  for (auto& l : lines) {
    std::unique_lock fl(l->flush_mu);
    std::vector<std::uint64_t> ivs;
    {
      std::lock_guard lk(l->mu);
      if (!l->dirty) continue;
      ivs = l->ivs;
      seqs.insert(seqs.end(), l->unflushed.begin(), l->unflushed.end());
      l->unflushed.clear();
      l->dirty = false;
    }
    auto rec = aggregated_record(l->ds, std::move(ivs), rb);
    recs.insert(recs.end(), rec.begin(), rec.end());
    dss.push_back(l->ds);
    held.push_back(std::move(fl));
  }
  if (dss.empty()) return;
  try {
    // Adjacent aggregated sectors go out as one command.
    std::size_t run = 0;
    for (std::size_t i = 1; i <= dss.size(); ++i) {
      if (i == dss.size() || dss[i] != dss[i - 1] + 1) {
        dev_.write_sectors(dss[run], ByteSpan(recs).subspan(run * rb,
                                                            (i - run) * rb));
        run = i;
      }
    }
    journal_->mark_flushed(seqs);
  } catch (...) {
    failed_ = true;
    throw;
  }
  flushes_ += dss.size();
}

void RemoteEngine::flush_dirty(bool all) {
  std::set<std::uint64_t> want;
  {
    std::lock_guard lk(fl_mu_);
    want.swap(flush_requests_);
    all = all || flush_all_;
    flush_all_ = false;
  }
  if (all) {
    flush_lines(cache_->lines());
    return;
  }
  std::vector<std::shared_ptr<IvLine>> lines;
  for (auto ds : want) {
    if (auto l = cache_->peek(ds)) lines.push_back(std::move(l));
  }
  flush_lines(std::move(lines));
}

void RemoteEngine::request_flush(std::uint64_t ds) {
  {
    std::lock_guard lk(fl_mu_);
    flush_requests_.insert(ds);
  }
  fl_cv_.notify_one();
}

void RemoteEngine::flusher_loop() {
  auto next_sweep = std::chrono::steady_clock::now() + cfg_.flush_interval;
  while (!stopping_) {
    bool sweep;
    {
      std::unique_lock lk(fl_mu_);
      fl_cv_.wait_until(lk, next_sweep, [&] {
        return stopping_ || flush_all_ || !flush_requests_.empty();
      });
      if (stopping_) return;
      sweep = std::chrono::steady_clock::now() >= next_sweep;
    }
    if (journal_->in_use() * 2 >= journal_->capacity()) sweep = true;
    if (sweep) {
      next_sweep = std::chrono::steady_clock::now() + cfg_.flush_interval;
    }
    try {
      flush_dirty(sweep);
    } catch (...) {
      failed_ = true;
      return;
    }
  }
}

// ---- hashers ------------------------------------------------------------------

void RemoteEngine::enqueue_propagation(std::uint64_t ds) {
  std::size_t target;
  {
    std::lock_guard lk(hq_mu_);
    if (!queued_.insert(ds).second) return;
    target = rr_++ % hq_.size();
    hq_[target].push_back(ds);
    auto backlog = queued_.size();
    auto m = max_backlog_.load();
    while (backlog > m && !max_backlog_.compare_exchange_weak(m, backlog)) {
    }
  }
  hq_cv_[target].notify_one();
}

void RemoteEngine::propagate(std::uint64_t ds) {
  auto filter = [this](std::vector<std::uint64_t>& v) {
    journal_->filter_uncommitted(v);
  };
  tree_->propagate(ds, filter,
                   [this](const Node& root, const std::vector<std::uint64_t>& s) {
                     if (s.empty() && root == last_root_) return;
                     journal_->commit_root(root, s);
                     last_root_ = root;
                     ++commits_;
                   });
  ++props_;
}

void RemoteEngine::hasher_loop(unsigned id) {
  auto& q = hq_[id];
  std::unique_lock lk(hq_mu_);
  while (true) {
    hq_cv_[id].wait(lk, [&] { return stopping_ || !q.empty(); });
    if (stopping_) return;
    auto ds = q.front();
    q.pop_front();
    queued_.erase(ds);
    ++active_hashers_;
    lk.unlock();
    try {
      propagate(ds);
    } catch (...) {
      failed_ = true;
    }
    lk.lock();
    --active_hashers_;
    idle_cv_.notify_all();
    if (failed_) return;
  }
}

// ---- requests -----------------------------------------------------------------

std::vector<RemoteEngine::Group> RemoteEngine::groups_of(
    std::uint64_t start, std::uint32_t count) const {
  std::vector<Group> out;
  for (std::uint32_t i = 0; i < count;) {
    auto ds = geom_.metadata_location(start + i).sector;
    auto end_of_ds = geom_.first_sector_of(ds) + geom_.data_set_size();
    auto n = static_cast<std::uint32_t>(
        std::min<std::uint64_t>(count - i, end_of_ds - (start + i)));
    out.push_back({ds, i, n});
    i += n;
  }
  return out;
}

std::vector<std::size_t> RemoteEngine::stripes_of(
    const std::vector<Group>& gs) const {
  std::vector<std::size_t> s;
  for (const auto& g : gs) s.push_back(g.ds % kStripes);
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

void RemoteEngine::write(std::uint64_t start, ByteSpan records) {
  check_alive();
  const auto rb = geom_.record_bytes();
  if (records.empty() || records.size() % rb != 0) {
    throw Error(ErrorKind::kInvalidArgument, "write needs whole records");
  }
  const auto count = static_cast<std::uint32_t>(records.size() / rb);
  if (start >= geom_.data_sector_count() ||
      count > geom_.data_sector_count() - start) {
    throw Error(ErrorKind::kOutOfRange, "write past the end of the device");
  }
  std::vector<SectorMetadata64> metas(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    try {
      metas[i] = meta_of(records.subspan(std::size_t{i} * rb, rb));
    } catch (const Error& e) {
      throw SectorError(ErrorKind::kInvalidArgument, start + i, e.what());
    }
    if (cfg_.mode == RemoteMode::kFreshness && metas[i].iv_counter == 0) {
      throw SectorError(ErrorKind::kInvalidArgument, start + i,
                        "iv_counter 0 is reserved for unwritten sectors");
    }
  }
  if (cfg_.mode == RemoteMode::kStore) {
    Bytes recs(records.begin(), records.end());
    for (std::uint32_t i = 0; i < count; ++i) {
      put_meta(MutableByteSpan(recs).subspan(std::size_t{i} * rb, rb),
               metas[i].persisted());
    }
    dev_.write_sectors(geom_.data_to_physical(start), recs);
    writes_ += count;
    return;
  }

  std::vector<std::uint64_t> sectors(count);
  for (std::uint32_t i = 0; i < count; ++i) sectors[i] = start + i;
  busy_.acquire(sectors, [this](std::uint64_t s) {
    auto ds = geom_.metadata_location(s).sector;
    request_flush(ds);
    if (cfg_.eventual_consistency) enqueue_propagation(ds);
  });
  std::vector<std::uint32_t> slots;
  try {
    slots = journal_->reserve(count, [this] {
      {
        std::lock_guard lk(fl_mu_);
        flush_all_ = true;
      }
      fl_cv_.notify_one();
    });
  } catch (...) {
    busy_.release_all(sectors);
    throw;
  }

  const auto groups = groups_of(start, count);
  const auto stripes = stripes_of(groups);
  for (auto s : stripes) ds_locks_[s].lock();
  auto unlock_all = [&] {
    for (auto it = stripes.rbegin(); it != stripes.rend(); ++it) {
      ds_locks_[*it].unlock();
    }
  };

  bool begun = false;
  std::vector<std::uint64_t> seqs;
  try {
    const auto S = geom_.data_set_size();
    std::vector<std::shared_ptr<IvLine>> lines;
    std::vector<Node> hashes;
    std::vector<JournalEntry> entries(count);
    for (const auto& g : groups) {
      auto line = cache_->get(g.ds);
      std::vector<std::uint64_t> next;
      {
        std::lock_guard lk(line->mu);
        next = line->ivs;
      }
      for (std::uint32_t k = 0; k < g.count; ++k) {
        auto i = g.first + k;
        auto off = geom_.metadata_location(start + i).offset;
        entries[i] = {start + i, next[off], metas[i].iv_counter,
                      metas[i].key_id, JournalStatus::kPending, 0};
        next[off] = metas[i].iv_counter;
      }
      hashes.push_back(node_hash(next, S, cfg_.suite));
      lines.push_back(std::move(line));
    }

    seqs = journal_->begin(slots, entries);
    begun = true;

    Bytes recs(records.begin(), records.end());
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const auto& g = groups[gi];
      for (std::uint32_t k = 0; k < g.count; ++k) {
        auto i = g.first + k;
        auto m = metas[i].persisted();
        m.freshness_tag =
            freshness_tag(fkey_, start + i, m.iv_counter, hashes[gi], cfg_.suite);
        put_meta(MutableByteSpan(recs).subspan(std::size_t{i} * rb, rb), m);
      }
    }
    dev_.write_sectors(geom_.data_to_physical(start), recs);
    journal_->mark_persisted(seqs);

    auto filter = [this](std::vector<std::uint64_t>& v) {
      journal_->filter_uncommitted(v);
    };
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const auto& g = groups[gi];
      auto& line = *lines[gi];
      std::span<const std::uint64_t> gseqs(seqs.data() + g.first, g.count);
      std::lock_guard lk(line.mu);
      for (std::uint32_t k = 0; k < g.count; ++k) {
        auto i = g.first + k;
        line.ivs[geom_.metadata_location(start + i).offset] = metas[i].iv_counter;
      }
      line.hash = hashes[gi];
      line.dirty = true;
      line.unflushed.insert(line.unflushed.end(), gseqs.begin(), gseqs.end());
      tree_->update_level1(g.ds, hashes[gi], gseqs, filter);
    }
  } catch (...) {
    unlock_all();
    if (!begun) {
      journal_->release(slots);
      busy_.release_all(sectors);
    } else {
      failed_ = true;
    }
    throw;
  }
  unlock_all();
  writes_ += count;

  try {
    for (const auto& g : groups) {
      if (cfg_.eventual_consistency) {
        enqueue_propagation(g.ds);
      } else {
        propagate(g.ds);
      }
    }
  } catch (...) {
    failed_ = true;
    throw;
  }
  journal_->filter_uncommitted(seqs);
  if (!seqs.empty()) ++early_acks_;
}

void RemoteEngine::verify_sector(std::uint64_t sector, MutableByteSpan record) {
  auto integrity = [&](const std::string& why) {
    ++integ_err_;
    throw SectorError(ErrorKind::kIntegrity, sector, why);
  };
  auto stale = [&](const std::string& why) {
    ++fresh_err_;
    throw SectorError(ErrorKind::kFreshness, sector, why);
  };
  SectorMetadata64 m;
  try {
    m = meta_of(record);
  } catch (const Error& e) {
    integrity(e.what());
  }
  if (m.net_counter != 0 || !all_zero(m.net_mac)) {
    integrity("persisted transport fields are not zero");
  }
  const auto loc = geom_.metadata_location(sector);
  if (m.unwritten()) {
    if (!all_zero(record.first(kSectorBytes))) {
      integrity("blank sector holds data");
    }
    auto line = cache_->get(loc.sector);
    std::lock_guard lk(line->mu);
    if (line->ivs[loc.offset] != 0) stale("sector was written but reads blank");
    ++unwritten_;
    return;
  }
  if (m.iv_counter == 0) integrity("iv_counter 0 on a written sector");

  auto expect = freshness_tag(fkey_, sector, m.iv_counter,
                              tree_->level1(loc.sector), cfg_.suite);
  if (constant_time_equal(expect, m.freshness_tag)) {
    ++fast_;
    return;
  }
  ++full_;
  if (!freshness_tag_authentic(fkey_, sector, m.iv_counter, m.freshness_tag,
                               cfg_.suite)) {
    stale("freshness tag is corrupt");
  }
  auto line = cache_->get(loc.sector);
  std::lock_guard lk(line->mu);
  if (!constant_time_equal(line->hash, tree_->level1(loc.sector))) {
    stale("cached IVs disagree with the tree");
  }
  if (line->ivs[loc.offset] != m.iv_counter) stale("stale sector (IV mismatch)");
}

Bytes RemoteEngine::read(std::uint64_t start, std::uint32_t count) {
  check_alive();
  if (count == 0 || start >= geom_.data_sector_count() ||
      count > geom_.data_sector_count() - start) {
    throw Error(ErrorKind::kOutOfRange, "read outside the device");
  }
  const auto rb = geom_.record_bytes();
  if (cfg_.mode == RemoteMode::kStore) {
    auto recs = dev_.read_sectors(geom_.data_to_physical(start), count);
    reads_ += count;
    return recs;
  }
  const auto groups = groups_of(start, count);
  const auto stripes = stripes_of(groups);
  for (auto s : stripes) ds_locks_[s].lock_shared();
  Bytes recs;
  try {
    recs = dev_.read_sectors(geom_.data_to_physical(start), count);
    for (std::uint32_t i = 0; i < count; ++i) {
      verify_sector(start + i,
                    MutableByteSpan(recs).subspan(std::size_t{i} * rb, rb));
    }
  } catch (...) {
    for (auto s : stripes) ds_locks_[s].unlock_shared();
    throw;
  }
  for (auto s : stripes) ds_locks_[s].unlock_shared();
  reads_ += count;
  return recs;
}

std::uint64_t RemoteEngine::refresh_tags(std::uint64_t first_ds,
                                         std::uint64_t count) {
  check_alive();
  if (cfg_.mode == RemoteMode::kStore) return 0;
  const auto D = geom_.data_set_count();
  if (first_ds > D || count > D - first_ds) {
    throw Error(ErrorKind::kOutOfRange, "data set range outside the device");
  }
  const auto rb = geom_.record_bytes();
  std::uint64_t visited = 0;
  for (auto ds = first_ds; ds < first_ds + count; ++ds) {
    std::unique_lock lk(ds_locks_[ds % kStripes]);
    auto first = geom_.first_sector_of(ds);
    auto pop = geom_.data_set_population(ds);
    auto recs = dev_.read_sectors(geom_.data_to_physical(first), pop);
    auto parent = tree_->level1(ds);
    std::uint64_t here = 0;
    for (std::uint32_t k = 0; k < pop; ++k) {
      MutableByteSpan rec(recs.data() + std::size_t{k} * rb, rb);
      verify_sector(first + k, rec);
      auto m = meta_of(rec);
      if (m.unwritten()) continue;
      m.freshness_tag =
          freshness_tag(fkey_, first + k, m.iv_counter, parent, cfg_.suite);
      put_meta(rec, m);
      ++here;
    }
    if (here > 0) dev_.write_sectors(geom_.data_to_physical(first), recs);
    visited += here;
  }
  return visited;
}

void RemoteEngine::drain() {
  check_alive();
  if (cfg_.mode == RemoteMode::kStore) return;
  while (true) {
    if (cfg_.eventual_consistency) {
      std::unique_lock lk(hq_mu_);
      idle_cv_.wait_for(lk, std::chrono::milliseconds(50), [&] {
        return failed_ || (queued_.empty() && active_hashers_ == 0);
      });
      if (!queued_.empty() || active_hashers_ != 0) {
        lk.unlock();
        check_alive();
        continue;
      }
    }
    check_alive();
    flush_lines(cache_->lines());
    if (journal_->live() == 0) {
      bool clean = true;
      for (auto& l : cache_->lines()) {
        std::lock_guard lk(l->mu);
        clean = clean && !l->dirty;
      }
      if (clean) return;
    }
    journal_->wait_empty(std::chrono::milliseconds(1));
  }
}

// ---- introspection ------------------------------------------------------------

RemoteStats RemoteEngine::stats() const {
  RemoteStats s;
  s.writes = writes_;
  s.reads = reads_;
  s.fast_hits = fast_;
  s.full_path = full_;
  s.unwritten_reads = unwritten_;
  s.freshness_errors = fresh_err_;
  s.integrity_errors = integ_err_;
  s.propagations = props_;
  s.root_commits = commits_;
  s.line_flushes = flushes_;
  s.early_acks = early_acks_.load();
  s.max_hasher_backlog = max_backlog_;
  if (cfg_.mode == RemoteMode::kFreshness) {
    {
      std::lock_guard lk(hq_mu_);
      s.hasher_backlog = queued_.size();
    }
    s.cache = cache_->stats();
  }
  return s;
}

Node RemoteEngine::root() const { return tree_ ? tree_->root() : Node{}; }

Node RemoteEngine::persisted_root() const {
  return nv_ ? nv_->image().root : Node{};
}

std::vector<std::vector<Node>> RemoteEngine::tree_snapshot() const {
  return tree_ ? tree_->snapshot() : std::vector<std::vector<Node>>{};
}

std::size_t RemoteEngine::journal_live() const {
  return journal_ ? journal_->live() : 0;
}

}  // namespace snvme
