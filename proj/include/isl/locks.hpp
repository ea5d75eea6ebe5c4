#pragma once

#include <algorithm>
#include <mutex>
#include <unordered_map>
#include <vector>

#include "isl/common.hpp"

namespace isl {

enum class LockMode : std::uint8_t { Shared, Exclusive };

enum class LockResult : std::uint8_t {
  Granted,
  Conflict,  // NO_WAIT: requester must abort
};

// Row-lock table, sharded by key hash. NO_WAIT policy: a request that is
// incompatible with current holders fails immediately, so no wait queue
// exists and distributed deadlock is impossible.
//
// Compatibility: Shared/Shared only. A transaction already holding a key may
// re-request it; Shared -> Exclusive upgrades succeed only for a sole holder.
class LockManager {
 public:
  explicit LockManager(bool enabled = true, std::size_t shards = 64)
      : enabled_(enabled), shards_(shards) {}

  bool enabled() const { return enabled_; }

  LockResult acquire(TxnId txn, Key key, LockMode mode) {
    if (!enabled_) return LockResult::Granted;
    Shard& sh = shard(key);
    std::lock_guard<std::mutex> g(sh.mu);
    auto it = sh.table.find(key);
    if (it == sh.table.end()) {
      Entry e;
      e.mode = mode;
      e.holders.push_back(txn);
      sh.table.emplace(key, std::move(e));
      return LockResult::Granted;
    }
    Entry& e = it->second;
    bool self = std::find(e.holders.begin(), e.holders.end(), txn) != e.holders.end();
    if (self) {
      if (mode == LockMode::Shared || e.mode == LockMode::Exclusive)
        return LockResult::Granted;
      // Shared -> Exclusive upgrade
      if (e.holders.size() == 1) {
        e.mode = LockMode::Exclusive;
        return LockResult::Granted;
      }
      return LockResult::Conflict;
    }
    if (mode == LockMode::Shared && e.mode == LockMode::Shared) {
      e.holders.push_back(txn);
      return LockResult::Granted;
    }
    return LockResult::Conflict;
  }

  // Releases every lock `txn` holds among `keys` (the txn's lock list).
  void release_all(TxnId txn, const std::vector<Key>& keys) {
    if (!enabled_) return;
    for (Key k : keys) {
      Shard& sh = shard(k);
      std::lock_guard<std::mutex> g(sh.mu);
      auto it = sh.table.find(k);
      if (it == sh.table.end()) continue;
      auto& holders = it->second.holders;
      holders.erase(std::remove(holders.begin(), holders.end(), txn), holders.end());
      if (holders.empty()) sh.table.erase(it);
    }
  }

  // Test/diagnostic view of one key's lock entry.
  struct EntryView {
    bool held = false;
    LockMode mode = LockMode::Shared;
    std::size_t holder_count = 0;
  };

  EntryView peek(Key key) {
    EntryView v;
    if (!enabled_) return v;
    Shard& sh = shard(key);
    std::lock_guard<std::mutex> g(sh.mu);
    auto it = sh.table.find(key);
    if (it == sh.table.end()) return v;
    v.held = true;
    v.mode = it->second.mode;
    v.holder_count = it->second.holders.size();
    return v;
  }

 private:
  struct Entry {
    LockMode mode = LockMode::Shared;
    std::vector<TxnId> holders;  // small; linear scans beat a set here
  };
  struct Shard {
    std::mutex mu;
    std::unordered_map<Key, Entry> table;
  };

  Shard& shard(Key k) { return shards_vec_[splitmix64(k) % shards_]; }

  bool enabled_;
  std::size_t shards_;
  std::vector<Shard> shards_vec_{shards_};
};

}  // namespace isl
