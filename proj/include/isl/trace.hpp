#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <unordered_map>
#include <vector>

#include "isl/common.hpp"

namespace isl {

// One committed transaction as the serializability oracle sees it: the stamp
// gives the claimed serial position, tag reproduces update payloads.
struct CommitRecord {
  std::uint64_t stamp = 0;
  Gtid gtid = 0;  // 0 for single-instance commits
  std::uint64_t tag = 0;
  bool update = false;
  std::vector<Key> keys;  // deduplicated full footprint
};

struct DecisionRecord {
  Gtid gtid = 0;
  bool commit = false;
};

struct AuditTraceOptions {
  bool record_commits = false;
  bool record_decisions = false;
  bool count_messages = false;
};

// Shared observation point for tests and benchmarks. Stamp and id counters
// are always live; record-keeping is opt-in so measurement runs stay lean.
class AuditTrace {
 public:
  using Options = AuditTraceOptions;

  explicit AuditTrace(const Options& opts = {}) : opts_(opts) {}

  std::uint64_t next_stamp() { return stamp_.fetch_add(1, std::memory_order_relaxed); }
  Gtid next_gtid() { return gtid_.fetch_add(1, std::memory_order_relaxed); }
  std::uint64_t next_tag() { return tag_.fetch_add(1, std::memory_order_relaxed); }

  bool recording_commits() const { return opts_.record_commits; }

  void record_commit(CommitRecord&& r) {
    if (!opts_.record_commits) return;
    std::lock_guard<std::mutex> g(mu_);
    commits_.push_back(std::move(r));
  }

  void record_decision(Gtid gtid, bool commit) {
    if (!opts_.record_decisions) return;
    std::lock_guard<std::mutex> g(mu_);
    decisions_.push_back(DecisionRecord{gtid, commit});
  }

  void count_message(Gtid gtid) {
    if (!opts_.count_messages || gtid == 0) return;
    std::lock_guard<std::mutex> g(mu_);
    ++message_counts_[gtid];
  }

  std::vector<CommitRecord> commits() const {
    std::lock_guard<std::mutex> g(mu_);
    return commits_;
  }

  std::vector<DecisionRecord> decisions() const {
    std::lock_guard<std::mutex> g(mu_);
    return decisions_;
  }

  std::uint64_t messages_for(Gtid gtid) const {
    std::lock_guard<std::mutex> g(mu_);
    auto it = message_counts_.find(gtid);
    return it == message_counts_.end() ? 0 : it->second;
  }

 private:
  Options opts_;
  std::atomic<std::uint64_t> stamp_{1};
  std::atomic<Gtid> gtid_{1};
  std::atomic<std::uint64_t> tag_{1};
  mutable std::mutex mu_;
  std::vector<CommitRecord> commits_;
  std::vector<DecisionRecord> decisions_;
  std::unordered_map<Gtid, std::uint64_t> message_counts_;
};

}  // namespace isl
