#pragma once

#include <atomic>
#include <cstdint>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "isl/common.hpp"
#include "isl/locks.hpp"
#include "isl/metrics.hpp"
#include "isl/wal.hpp"

namespace isl {

enum class OpStatus : std::uint8_t {
  Ok,
  WrongPartition,  // key outside this instance's owned range
  NotFound,        // key in range but not loaded
  Conflict,        // lock denied, caller must abort and may retry
  Refused,         // engine is shutting down or cannot log the operation
};

inline const char* to_string(OpStatus s) {
  switch (s) {
    case OpStatus::Ok: return "ok";
    case OpStatus::WrongPartition: return "wrong_partition";
    case OpStatus::NotFound: return "not_found";
    case OpStatus::Conflict: return "conflict";
    case OpStatus::Refused: return "refused";
  }
  return "?";
}

enum class Vote : std::uint8_t { Yes, YesReadOnly, No };

inline const char* to_string(Vote v) {
  switch (v) {
    case Vote::Yes: return "yes";
    case Vote::YesReadOnly: return "yes_readonly";
    case Vote::No: return "no";
  }
  return "?";
}

enum class TxnState : std::uint8_t { Active, Prepared, Committed, Aborted };

struct KeyRange {
  Key lo = 0;
  Key hi = 0;  // exclusive

  bool contains(Key k) const { return k >= lo && k < hi; }
  std::uint64_t size() const { return hi - lo; }
};

struct WriteEntry {
  Key key;
  Payload before;  // image at first write by this txn, used for undo
  Payload after;
};

// Transaction handle local to one storage engine. A distributed transaction
// owns one of these per participant instance (gtid links them).
struct LocalTxn {
  TxnId id = 0;
  Gtid gtid = 0;  // 0 for single-instance transactions
  TxnState state = TxnState::Active;
  std::uint64_t tag = 0;   // request tag, stamped into update payloads
  bool use_locks = true;   // set at begin; never changes mid-transaction
  std::vector<Key> read_set;
  std::vector<WriteEntry> write_set;
  std::vector<Key> locked_keys;

  bool read_only() const { return write_set.empty(); }

  WriteEntry* find_write(Key k) {
    for (auto& w : write_set)
      if (w.key == k) return &w;
    return nullptr;
  }
};

struct Row {
  Payload value{};
  std::uint64_t version = 0;
  bool present = false;
};

// Single-partition storage engine: dense table over a contiguous key range,
// strict two-phase locking with immediate abort on conflict, and a write-ahead
// log. One engine is owned by exactly one instance.
class StorageEngine {
 public:
  struct Options {
    InstanceId instance = 0;
    KeyRange range;
    // Default for plain local transactions. Single-worker instances run with
    // this off; a distributed branch always locks regardless, and so does any
    // local transaction begun while a branch is open (force_locks at begin).
    bool locking_enabled = true;
    bool populate = true;  // load every key in range at construction
    Wal::Options wal;
  };

  explicit StorageEngine(const Options& opts)
      : instance_(opts.instance),
        range_(opts.range),
        default_locking_(opts.locking_enabled),
        locks_(true),
        wal_(opts.wal),
        rows_(opts.range.size()) {
    if (range_.hi < range_.lo) throw std::invalid_argument("storage: bad range");
    if (opts.populate) {
      for (Key k = range_.lo; k < range_.hi; ++k) {
        Row& r = slot(k);
        r.value = payload_for_key(k);
        r.present = true;
      }
    }
  }

  InstanceId instance() const { return instance_; }
  const KeyRange& range() const { return range_; }
  bool locking_enabled() const { return default_locking_; }
  Wal& wal() { return wal_; }
  LockManager& lock_manager() { return locks_; }

  // Insert outside any transaction; test setup for sparse tables.
  void load_row(Key k, const Payload& value) {
    if (!range_.contains(k)) throw std::invalid_argument("storage: load outside range");
    Row& r = slot(k);
    r.value = value;
    r.version = 0;
    r.present = true;
  }

  void begin_shutdown() { shutting_down_.store(true, std::memory_order_release); }

  OpStatus begin(LocalTxn& txn, Gtid gtid = 0, std::uint64_t tag = 0,
                 bool force_locks = false) {
    if (shutting_down_.load(std::memory_order_acquire)) return OpStatus::Refused;
    txn = LocalTxn{};
    txn.id = next_txn_.fetch_add(1, std::memory_order_relaxed);
    txn.gtid = gtid;
    txn.tag = tag;
    txn.use_locks = default_locking_ || force_locks || gtid != 0;
    return OpStatus::Ok;
  }

  OpStatus read_row(LocalTxn& txn, Key k, Payload* out = nullptr) {
    if (!range_.contains(k)) return OpStatus::WrongPartition;
    Row& r = slot(k);
    if (!r.present) return OpStatus::NotFound;
    if (!lock(txn, k, LockMode::Shared)) return OpStatus::Conflict;
    if (out) *out = r.value;
    txn.read_set.push_back(k);
    return OpStatus::Ok;
  }

  OpStatus update_row(LocalTxn& txn, Key k, const Payload& value) {
    if (!range_.contains(k)) return OpStatus::WrongPartition;
    Row& r = slot(k);
    if (!r.present) return OpStatus::NotFound;
    if (!lock(txn, k, LockMode::Exclusive)) return OpStatus::Conflict;
    WriteEntry* w = txn.find_write(k);
    try {
      ScopedPhaseTimer t(ScopedPhaseTimer::Phase::Log);
      wal_.append(txn.id, txn.gtid, LogKind::Update, k, &r.value, &value);
    } catch (const std::exception&) {
      // nothing applied yet; the caller aborts and the undo is a no-op
      return OpStatus::Refused;
    }
    if (w) {
      w->after = value;
    } else {
      txn.write_set.push_back(WriteEntry{k, r.value, value});
    }
    r.value = value;
    return OpStatus::Ok;
  }

  // Callers that need a global commit order draw their stamp immediately
  // before this call: locks are released only here, so stamp order is a
  // linear extension of conflict order.
  void commit_local(LocalTxn& txn) {
    {
      ScopedPhaseTimer t(ScopedPhaseTimer::Phase::Log);
      wal_.append(txn.id, txn.gtid, LogKind::Commit, 0, nullptr, nullptr);
    }
    for (const WriteEntry& w : txn.write_set) slot(w.key).version++;
    txn.state = TxnState::Committed;
    release(txn);
  }

  void abort_local(LocalTxn& txn) {
    for (auto it = txn.write_set.rbegin(); it != txn.write_set.rend(); ++it)
      slot(it->key).value = it->before;
    {
      ScopedPhaseTimer t(ScopedPhaseTimer::Phase::Log);
      wal_.append(txn.id, txn.gtid, LogKind::Abort, 0, nullptr, nullptr);
    }
    txn.state = TxnState::Aborted;
    release(txn);
  }

  // First phase of distributed commit for the branch running here. A branch
  // that wrote nothing releases immediately and is finished; the vote tells
  // the coordinator to skip phase two for it.
  Vote prepare_local(LocalTxn& txn) {
    if (txn.read_only()) {
      txn.state = TxnState::Committed;
      release(txn);
      return Vote::YesReadOnly;
    }
    try {
      ScopedPhaseTimer t(ScopedPhaseTimer::Phase::Log);
      wal_.append(txn.id, txn.gtid, LogKind::Prepare, 0, nullptr, nullptr);
    } catch (const std::exception&) {
      abort_local(txn);
      return Vote::No;
    }
    txn.state = TxnState::Prepared;
    return Vote::Yes;
  }

  // Reads bypassing transactions; only safe when no txn is active (oracles,
  // replay checks).
  bool peek(Key k, Payload* value = nullptr, std::uint64_t* version = nullptr) const {
    if (!range_.contains(k)) return false;
    const Row& r = rows_[k - range_.lo];
    if (!r.present) return false;
    if (value) *value = r.value;
    if (version) *version = r.version;
    return true;
  }

  std::vector<std::tuple<Key, std::uint64_t, Payload>> dump() const {
    std::vector<std::tuple<Key, std::uint64_t, Payload>> out;
    for (Key k = range_.lo; k < range_.hi; ++k) {
      const Row& r = rows_[k - range_.lo];
      if (r.present) out.emplace_back(k, r.version, r.value);
    }
    return out;
  }

  std::uint64_t state_fingerprint() const {
    std::uint64_t h = 0x9e3779b97f4a7c15ull;
    for (Key k = range_.lo; k < range_.hi; ++k) {
      const Row& r = rows_[k - range_.lo];
      if (!r.present) continue;
      h = splitmix64(h ^ k);
      h = splitmix64(h ^ r.version);
      std::uint64_t word = 0;
      for (std::size_t i = 0; i < payload_bytes; i += 8) {
        std::memcpy(&word, r.value.data() + i, 8);
        h = splitmix64(h ^ word);
      }
    }
    return h;
  }

  // Rebuild row images by scanning a log: redo committed transactions in log
  // order, ignore everything from transactions without a Commit record.
  static std::vector<std::tuple<Key, Payload>> replay(const std::vector<LogRecord>& log,
                                                      const KeyRange& range) {
    std::vector<bool> committed_seen;
    auto committed = [&](TxnId id) {
      return id < committed_seen.size() && committed_seen[id];
    };
    for (const LogRecord& rec : log) {
      if (rec.kind == LogKind::Commit) {
        if (rec.txn >= committed_seen.size()) committed_seen.resize(rec.txn + 1, false);
        committed_seen[rec.txn] = true;
      }
    }
    std::vector<Payload> img(range.size());
    for (Key k = range.lo; k < range.hi; ++k) img[k - range.lo] = payload_for_key(k);
    for (const LogRecord& rec : log) {
      if (rec.kind != LogKind::Update || !committed(rec.txn)) continue;
      if (!range.contains(rec.key)) continue;
      img[rec.key - range.lo] = rec.after;
    }
    std::vector<std::tuple<Key, Payload>> out;
    for (Key k = range.lo; k < range.hi; ++k)
      out.emplace_back(k, img[k - range.lo]);
    return out;
  }

 private:
  Row& slot(Key k) { return rows_[k - range_.lo]; }

  bool lock(LocalTxn& txn, Key k, LockMode mode) {
    if (!txn.use_locks) return true;
    LockResult r = locks_.acquire(txn.id, k, mode);
    if (r != LockResult::Granted) return false;
    for (Key held : txn.locked_keys)
      if (held == k) return true;
    txn.locked_keys.push_back(k);
    return true;
  }

  void release(LocalTxn& txn) {
    if (txn.use_locks) locks_.release_all(txn.id, txn.locked_keys);
    txn.locked_keys.clear();
  }

  InstanceId instance_;
  KeyRange range_;
  bool default_locking_;
  LockManager locks_;
  Wal wal_;
  std::vector<Row> rows_;
  std::atomic<TxnId> next_txn_{1};
  std::atomic<bool> shutting_down_{false};
};

}  // namespace isl
