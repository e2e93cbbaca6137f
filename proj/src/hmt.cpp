#include "snvme/hmt.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>

#include "snvme/error.hpp"
#include "snvme/layout.hpp"

namespace snvme {

std::vector<std::uint64_t> tree_level_sizes(std::uint64_t level1_nodes,
                                            std::uint32_t branching) {
  if (level1_nodes == 0 || branching < 2) {
    throw Error(ErrorKind::kInvalidArgument, "bad tree shape");
  }
  std::vector<std::uint64_t> sizes{level1_nodes};
  while (sizes.back() > 1 || sizes.size() < 2) {
    sizes.push_back((sizes.back() + branching - 1) / branching);
  }
  return sizes;
}

TreeSizing tree_sizing(double capacity_bytes, std::uint32_t data_set_size,
                       std::uint32_t branching, std::uint32_t node_bytes) {
  TreeSizing t;
  t.sectors = static_cast<std::uint64_t>(capacity_bytes / kSectorBytes);
  t.data_sets = compute_data_sets(t.sectors, data_set_size);
  t.level_nodes = tree_level_sizes(t.data_sets, branching);
  for (auto n : t.level_nodes) t.total_nodes += n;
  t.bytes = static_cast<double>(t.total_nodes) * node_bytes;
  return t;
}

std::vector<std::vector<Node>> build_tree(std::vector<Node> level1,
                                          std::uint32_t branching,
                                          const CipherSuite& suite) {
  auto sizes = tree_level_sizes(level1.size(), branching);
  std::vector<std::vector<Node>> levels;
  levels.push_back(std::move(level1));
  for (std::size_t l = 1; l < sizes.size(); ++l) {
    const auto& below = levels.back();
    std::vector<Node> cur(sizes[l]);
    for (std::uint64_t i = 0; i < sizes[l]; ++i) {
      auto first = i * branching;
      auto n = std::min<std::uint64_t>(branching, below.size() - first);
      cur[i] = tree_node_hash(std::span(below).subspan(first, n), branching,
                              suite);
    }
    levels.push_back(std::move(cur));
  }
  return levels;
}

namespace {

// Node locks held by this thread, in acquisition order.
thread_local std::vector<std::uint64_t> t_held;

[[noreturn]] void lock_order_violation(std::uint64_t held, std::uint64_t want) {
  std::fprintf(stderr,
               "tree lock order violated: acquiring node %llu while holding "
               "node %llu\n",
               static_cast<unsigned long long>(want),
               static_cast<unsigned long long>(held));
  std::abort();
}

void merge_into(std::vector<std::uint64_t>& dst,
                const std::vector<std::uint64_t>& src) {
  if (src.empty()) return;
  std::vector<std::uint64_t> out;
  out.reserve(dst.size() + src.size());
  std::set_union(dst.begin(), dst.end(), src.begin(), src.end(),
                 std::back_inserter(out));
  dst.swap(out);
}

}  // namespace

HazelMerkleTree::HazelMerkleTree(std::vector<Node> level1,
                                 std::uint32_t branching,
                                 const CipherSuite& suite)
    : branching_(branching), suite_(suite) {
  sizes_ = tree_level_sizes(level1.size(), branching);
  offsets_.assign(sizes_.size(), 0);
  std::uint64_t total = 0;
  for (std::size_t l = sizes_.size(); l-- > 0;) {
    offsets_[l] = total;
    total += sizes_[l];
  }
  auto levels = build_tree(std::move(level1), branching, suite);
  nodes_.resize(total);
  for (std::size_t l = 0; l < levels.size(); ++l) {
    for (std::uint64_t i = 0; i < levels[l].size(); ++i) {
      nodes_[offsets_[l] + i].hash = levels[l][i];
    }
  }
  locks_ = std::make_unique<std::atomic<bool>[]>(total);
}

void HazelMerkleTree::lock(std::uint64_t g) const {
  if (!t_held.empty() && g <= t_held.back()) {
    lock_order_violation(t_held.back(), g);
  }
  auto& l = locks_[g];
  while (l.exchange(true, std::memory_order_acquire)) {
    l.wait(true, std::memory_order_relaxed);
  }
  t_held.push_back(g);
  if (tracing_.load(std::memory_order_relaxed)) {
    std::lock_guard lk(trace_mu_);
    trace_.push_back(g);
  }
}

void HazelMerkleTree::unlock(std::uint64_t g) const {
  auto it = std::find(t_held.begin(), t_held.end(), g);
  if (it != t_held.end()) t_held.erase(it);
  locks_[g].store(false, std::memory_order_release);
  locks_[g].notify_one();
}

Node HazelMerkleTree::level1(std::uint64_t ds) const {
  auto g = global_index(1, ds);
  lock(g);
  Node h = nodes_[g].hash;
  unlock(g);
  return h;
}

void HazelMerkleTree::update_level1(std::uint64_t ds, const Node& hash,
                                    std::span<const std::uint64_t> seqs,
                                    const PendingFilter& filter) {
  if (ds >= sizes_[0]) throw Error(ErrorKind::kOutOfRange, "no such data set");
  std::vector<std::uint64_t> add(seqs.begin(), seqs.end());
  std::sort(add.begin(), add.end());
  auto g = global_index(1, ds);
  lock(g);
  auto& s = nodes_[g];
  s.hash = hash;
  merge_into(s.pending, add);
  if (filter) filter(s.pending);
  unlock(g);
}

void HazelMerkleTree::propagate(std::uint64_t ds, const PendingFilter& filter,
                                const RootCommit& commit) {
  std::uint64_t idx = ds;
  std::vector<Node> children(branching_);
  for (std::size_t level = 2; level <= sizes_.size(); ++level) {
    auto parent = idx / branching_;
    auto g = global_index(level, parent);
    lock(g);
    auto first = parent * branching_;
    auto n = std::min<std::uint64_t>(branching_, sizes_[level - 2] - first);
    std::vector<std::uint64_t> pending;
    for (std::uint64_t c = 0; c < n; ++c) {
      auto cg = global_index(level - 1, first + c);
      lock(cg);
      children[c] = nodes_[cg].hash;
      merge_into(pending, nodes_[cg].pending);
      unlock(cg);
    }
    if (filter) filter(pending);
    auto& s = nodes_[g];
    s.hash = tree_node_hash(std::span(children).first(n), branching_, suite_);
    s.pending = std::move(pending);
    if (level == sizes_.size()) {
      try {
        commit(s.hash, s.pending);
      } catch (...) {
        unlock(g);
        throw;
      }
    }
    unlock(g);
    idx = parent;
  }
}

Node HazelMerkleTree::root() const {
  lock(0);
  Node h = nodes_[0].hash;
  unlock(0);
  return h;
}

std::vector<std::vector<Node>> HazelMerkleTree::snapshot() const {
  std::vector<std::vector<Node>> out(sizes_.size());
  for (std::size_t l = 0; l < sizes_.size(); ++l) {
    out[l].resize(sizes_[l]);
    for (std::uint64_t i = 0; i < sizes_[l]; ++i) {
      auto g = offsets_[l] + i;
      lock(g);
      out[l][i] = nodes_[g].hash;
      unlock(g);
    }
  }
  return out;
}

void HazelMerkleTree::enable_lock_trace(bool on) {
  std::lock_guard lk(trace_mu_);
  trace_.clear();
  tracing_.store(on);
}

std::vector<std::uint64_t> HazelMerkleTree::lock_trace() const {
  std::lock_guard lk(trace_mu_);
  return trace_;
}

}  // namespace snvme
