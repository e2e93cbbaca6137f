#include "snvme/iv_cache.hpp"

#include "snvme/error.hpp"

namespace snvme {

IvCache::IvCache(std::size_t capacity, Loader loader, Writeback writeback)
    : capacity_(capacity),
      loader_(std::move(loader)),
      writeback_(std::move(writeback)) {
  if (capacity_ == 0) {
    throw Error(ErrorKind::kInvalidArgument, "cache capacity must be > 0");
  }
}

std::shared_ptr<IvLine> IvCache::get(std::uint64_t ds) {
  std::lock_guard lk(mu_);
  if (auto it = map_.find(ds); it != map_.end()) {
    ++stats_.hits;
    lru_.splice(lru_.begin(), lru_, it->second);
    return *it->second;
  }
  ++stats_.misses;
  auto line = loader_(ds);
  lru_.push_front(line);
  map_[ds] = lru_.begin();
  evict_locked();
  return line;
}

void IvCache::evict_locked() {
  auto it = lru_.end();
  while (lru_.size() > capacity_ && it != lru_.begin()) {
    --it;
    // In use elsewhere: the list and the caller hold the only other refs.
    if (it->use_count() > 1) continue;
    auto& line = **it;
    bool dirty;
    {
      std::lock_guard l(line.mu);
      dirty = line.dirty;
    }
    if (dirty) {
      writeback_(line);
      ++stats_.writebacks;
    }
    map_.erase(line.ds);
    it = lru_.erase(it);
    ++stats_.evictions;
  }
}

std::shared_ptr<IvLine> IvCache::peek(std::uint64_t ds) const {
  std::lock_guard lk(mu_);
  auto it = map_.find(ds);
  return it == map_.end() ? nullptr : *it->second;
}

std::vector<std::shared_ptr<IvLine>> IvCache::lines() const {
  std::lock_guard lk(mu_);
  return {lru_.begin(), lru_.end()};
}

std::size_t IvCache::size() const {
  std::lock_guard lk(mu_);
  return lru_.size();
}

IvCacheStats IvCache::stats() const {
  std::lock_guard lk(mu_);
  return stats_;
}

}  // namespace snvme
