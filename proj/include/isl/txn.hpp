#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <unordered_map>
#include <vector>

#include "isl/common.hpp"
#include "isl/metrics.hpp"
#include "isl/partition.hpp"
#include "isl/storage.hpp"
#include "isl/trace.hpp"
#include "isl/transport.hpp"

namespace isl {

struct TxnRequest {
  TxnOp op = TxnOp::ReadRows;
  std::vector<Key> keys;
  InstanceId origin = 0;
  bool multisite_intent = false;  // generated as multisite; may still be single-site
  std::uint64_t tag = 0;
  std::shared_ptr<std::promise<struct TxnResult>> done;  // optional, test path
};

struct TxnResult {
  bool committed = false;
  std::uint32_t attempts = 0;
  Gtid gtid = 0;  // 0 when executed without coordination
  std::uint64_t stamp = 0;
  std::vector<ResultRow> rows;
};

enum class SiteClass : std::uint8_t { Local, MultisiteLocal, Distributed };

inline const char* to_string(SiteClass c) {
  switch (c) {
    case SiteClass::Local: return "local";
    case SiteClass::MultisiteLocal: return "multisite_local";
    case SiteClass::Distributed: return "distributed";
  }
  return "?";
}

struct SiteClassification {
  SiteClass kind = SiteClass::Local;
  std::vector<InstanceId> participants;  // sorted, includes the origin
};

// Participants are the owners of the keys plus the origin: the origin always
// coordinates, so it takes part even when it owns none of the data.
inline SiteClassification classify(const TxnRequest& req, const PartitionMap& pm) {
  if (req.keys.empty()) throw std::invalid_argument("classify: no keys");
  SiteClassification out;
  out.participants.push_back(req.origin);
  for (Key k : req.keys) {
    InstanceId p = pm.owner_of(k);
    if (std::find(out.participants.begin(), out.participants.end(), p) ==
        out.participants.end())
      out.participants.push_back(p);
  }
  std::sort(out.participants.begin(), out.participants.end());
  if (out.participants.size() >= 2)
    out.kind = SiteClass::Distributed;
  else
    out.kind = req.multisite_intent ? SiteClass::MultisiteLocal : SiteClass::Local;
  return out;
}

struct RuntimeTuning {
  std::int64_t exec_timeout_ns = 1'000'000'000;
  std::int64_t vote_timeout_ns = 1'000'000'000;
  std::int64_t ack_timeout_ns = 2'000'000'000;
  std::int64_t requery_interval_ns = 100'000'000;
  std::int64_t branch_ttl_ns = 3'000'000'000;
  std::int64_t dispatcher_poll_ns = 10'000'000;
  std::int64_t idle_wait_ns = 1'000'000;
};

// One deployed instance: a storage engine, a dispatcher routing inbound
// messages, and W workers that execute client requests and branch work.
// Workers waiting on 2PC replies keep draining branch work, so a 1-worker
// instance stays live while it coordinates; the dispatcher itself never
// touches storage.
class InstanceRuntime {
 public:
  using Generator = std::function<std::optional<TxnRequest>()>;

  InstanceRuntime(InstanceId id, StorageEngine::Options engine_opts,
                  std::uint32_t n_workers, Transport* transport,
                  const PartitionMap* pmap, AuditTrace* trace,
                  const RuntimeTuning& tuning)
      : id_(id),
        engine_(engine_opts),
        transport_(transport),
        pmap_(pmap),
        trace_(trace),
        tuning_(tuning),
        n_workers_(n_workers),
        generators_(n_workers) {
    worker_stats_.reserve(n_workers);
    for (std::uint32_t i = 0; i < n_workers; ++i)
      worker_stats_.push_back(std::make_unique<WorkerStats>());
  }

  InstanceId id() const { return id_; }
  StorageEngine& engine() { return engine_; }
  std::uint32_t n_workers() const { return n_workers_; }
  WorkerStats& stats_of(std::uint32_t w) { return *worker_stats_[w]; }

  // Install before start; immutable afterwards. One generator per worker so
  // generation stays single-threaded and per-seed deterministic.
  void set_generator(std::uint32_t w, Generator g) { generators_.at(w) = std::move(g); }

  void start_dispatcher() {
    dispatcher_ = std::thread([this] { dispatcher_loop(); });
  }

  // Runs in the caller's thread; the cluster wraps it with core pinning.
  void run_worker(std::uint32_t w) { worker_loop(w); }

  bool submit(TxnRequest req) {
    std::unique_lock<std::mutex> lk(mu_);
    if (!accepting_) return false;
    client_not_full_.wait(lk, [&] { return client_q_.size() < 1024 || !accepting_; });
    if (!accepting_) return false;
    client_q_.push_back(std::move(req));
    cv_.notify_all();
    return true;
  }

  void stop_accepting() {
    std::lock_guard<std::mutex> lk(mu_);
    accepting_ = false;
    client_not_full_.notify_all();
    cv_.notify_all();
  }

  bool quiescent() {
    std::lock_guard<std::mutex> lk(mu_);
    return client_q_.empty() && work_q_.empty() && coord_.empty() && branches_.empty() &&
           active_requests_ == 0;
  }

  void shutdown() {
    engine_.begin_shutdown();
    std::lock_guard<std::mutex> lk(mu_);
    running_ = false;
    accepting_ = false;
    cv_.notify_all();
    client_not_full_.notify_all();
  }

  void join_dispatcher() {
    if (dispatcher_.joinable()) dispatcher_.join();
  }

  // Fault injection: hold the next `count` Prepare replies for delay_ns.
  void arm_vote_delay(std::uint32_t count, std::int64_t delay_ns) {
    std::lock_guard<std::mutex> lk(mu_);
    vote_delay_count_ = count;
    vote_delay_ns_ = delay_ns;
  }

 private:
  struct CoordState {
    int phase = 0;  // 0 executing, 1 collecting votes, 2 collecting acks
    std::size_t awaiting_results = 0;
    bool exec_failed = false;
    std::vector<ResultRow> rows;
    std::vector<InstanceId> voted;
    std::vector<InstanceId> yes_participants;  // voted Yes, need phase two
    bool any_no = false;
    std::size_t awaiting_votes = 0;
    std::vector<InstanceId> acked;
    std::size_t awaiting_acks = 0;
  };

  struct BranchState {
    LocalTxn txn;
    InstanceId coordinator = 0;
    bool prepared = false;
    std::int64_t created_at = 0;
    std::int64_t prepared_at = 0;
  };

  // Work items are Messages plus one local-only marker: expire_only aborts a
  // still-active branch whose coordinator went silent, and must not touch a
  // branch that prepared in the meantime.
  struct WorkItem {
    Message msg;
    bool expire_only = false;
  };

  // ---- dispatcher ----------------------------------------------------------

  void dispatcher_loop() {
    Message m;
    std::int64_t next_scan = now_ns() + tuning_.requery_interval_ns;
    for (;;) {
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (!running_) break;
      }
      if (transport_->recv(id_, m, now_ns() + tuning_.dispatcher_poll_ns)) route(std::move(m));
      std::int64_t now = now_ns();
      if (now >= next_scan) {
        branch_maintenance(now);
        next_scan = now + tuning_.requery_interval_ns;
      }
    }
  }

  void route(Message&& m) {
    switch (m.kind) {
      case MsgKind::ExecBranch:
      case MsgKind::Prepare:
      case MsgKind::Decision: {
        std::lock_guard<std::mutex> lk(mu_);
        work_q_.push_back(WorkItem{std::move(m), false});
        cv_.notify_all();
        return;
      }
      case MsgKind::BranchResult: {
        std::lock_guard<std::mutex> lk(mu_);
        auto it = coord_.find(m.gtid);
        if (it == coord_.end() || it->second->phase != 0) return;  // stale
        CoordState* c = it->second.get();
        if (c->awaiting_results == 0) return;
        c->awaiting_results--;
        if (m.status != OpStatus::Ok)
          c->exec_failed = true;
        else
          c->rows.insert(c->rows.end(), m.rows.begin(), m.rows.end());
        cv_.notify_all();
        return;
      }
      case MsgKind::Vote: {
        std::unique_lock<std::mutex> lk(mu_);
        auto it = coord_.find(m.gtid);
        if (it == coord_.end()) {
          // Forgotten coordinator state means the txn aborted: answer the
          // requery so the prepared participant can roll back.
          lk.unlock();
          send_decision(m.gtid, m.origin, false);
          return;
        }
        CoordState* c = it->second.get();
        if (c->phase == 2) {
          // Duplicate vote while acks are pending: the decision was lost on a
          // slow participant, resend it.
          bool was_yes = std::find(c->yes_participants.begin(), c->yes_participants.end(),
                                   m.origin) != c->yes_participants.end();
          lk.unlock();
          if (was_yes) send_decision(m.gtid, m.origin, true);
          return;
        }
        if (c->phase != 1) return;
        if (std::find(c->voted.begin(), c->voted.end(), m.origin) != c->voted.end()) return;
        c->voted.push_back(m.origin);
        if (c->awaiting_votes > 0) c->awaiting_votes--;
        if (m.vote == Vote::No)
          c->any_no = true;
        else if (m.vote == Vote::Yes)
          c->yes_participants.push_back(m.origin);
        cv_.notify_all();
        return;
      }
      case MsgKind::Ack: {
        std::lock_guard<std::mutex> lk(mu_);
        auto it = coord_.find(m.gtid);
        if (it == coord_.end() || it->second->phase != 2) return;
        CoordState* c = it->second.get();
        if (std::find(c->acked.begin(), c->acked.end(), m.origin) != c->acked.end()) return;
        c->acked.push_back(m.origin);
        if (c->awaiting_acks > 0) c->awaiting_acks--;
        cv_.notify_all();
        return;
      }
    }
  }

  // Prepared branches re-send their vote until a decision arrives; active
  // branches whose coordinator has gone silent past the TTL are aborted
  // through the work queue (presumed abort allows that before preparing).
  void branch_maintenance(std::int64_t now) {
    std::vector<std::pair<Gtid, InstanceId>> requery;
    {
      std::lock_guard<std::mutex> lk(mu_);
      for (auto& [gtid, b] : branches_) {
        if (b.prepared) {
          if (now - b.prepared_at >= tuning_.requery_interval_ns) {
            requery.emplace_back(gtid, b.coordinator);
            b.prepared_at = now;
          }
        } else if (now - b.created_at >= tuning_.branch_ttl_ns) {
          Message d;
          d.kind = MsgKind::Decision;
          d.gtid = gtid;
          d.origin = b.coordinator;
          d.destination = id_;
          d.commit = false;
          work_q_.push_back(WorkItem{std::move(d), true});
          b.created_at = now;  // do not enqueue again next scan
          cv_.notify_all();
        }
      }
    }
    for (auto& [gtid, coord] : requery) {
      Message v;
      v.kind = MsgKind::Vote;
      v.gtid = gtid;
      v.origin = id_;
      v.destination = coord;
      v.vote = Vote::Yes;
      transport_->send(std::move(v));
    }
  }

  // ---- worker --------------------------------------------------------------

  void worker_loop(std::uint32_t w) {
    WorkerStats& stats = *worker_stats_[w];
    for (;;) {
      WorkItem work;
      TxnRequest req;
      enum { None, Work, Request, Generate } action = None;
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (!running_) return;
        if (!work_q_.empty()) {
          work = std::move(work_q_.front());
          work_q_.pop_front();
          action = Work;
        } else if (!client_q_.empty()) {
          req = std::move(client_q_.front());
          client_q_.pop_front();
          client_not_full_.notify_all();
          active_requests_++;
          action = Request;
        } else if (accepting_ && generators_[w]) {
          action = Generate;
        } else {
          cv_.wait_for(lk, std::chrono::nanoseconds(tuning_.idle_wait_ns));
          continue;
        }
      }
      switch (action) {
        case Work:
          execute_work(std::move(work), stats);
          break;
        case Request: {
          run_request(std::move(req), stats);
          std::lock_guard<std::mutex> lk(mu_);
          active_requests_--;
          break;
        }
        case Generate: {
          std::optional<TxnRequest> g = generators_[w]();
          if (!g) {
            std::unique_lock<std::mutex> lk(mu_);
            cv_.wait_for(lk, std::chrono::nanoseconds(tuning_.idle_wait_ns));
            break;
          }
          {
            std::lock_guard<std::mutex> lk(mu_);
            active_requests_++;
          }
          run_request(std::move(*g), stats);
          std::lock_guard<std::mutex> lk(mu_);
          active_requests_--;
          break;
        }
        case None:
          break;
      }
    }
  }

  bool pop_work(WorkItem& out) {
    std::lock_guard<std::mutex> lk(mu_);
    if (work_q_.empty()) return false;
    out = std::move(work_q_.front());
    work_q_.pop_front();
    return true;
  }

  // Branch work executed between or inside client attempts. Its time is
  // charged to this worker as work/comm/log directly and excluded from any
  // enclosing attempt via nested_ns.
  void execute_work(WorkItem&& item, WorkerStats& stats) {
    AttemptPhases phases;
    AttemptPhases* enclosing = tls_attempt_phases;
    tls_attempt_phases = &phases;
    std::int64_t t0 = now_ns();
    switch (item.msg.kind) {
      case MsgKind::ExecBranch: handle_exec_branch(item.msg); break;
      case MsgKind::Prepare: handle_prepare(item.msg); break;
      case MsgKind::Decision: handle_decision(item.msg, item.expire_only); break;
      default: break;
    }
    std::int64_t dur = now_ns() - t0;
    tls_attempt_phases = enclosing;
    if (enclosing) enclosing->nested_ns += static_cast<std::uint64_t>(dur);
    std::uint64_t overhead = phases.comm_ns + phases.log_ns + phases.nested_ns;
    std::uint64_t work = static_cast<std::uint64_t>(dur) > overhead
                             ? static_cast<std::uint64_t>(dur) - overhead
                             : 0;
    stats.work_ns.fetch_add(work, std::memory_order_relaxed);
    stats.comm_ns.fetch_add(phases.comm_ns, std::memory_order_relaxed);
    stats.log_ns.fetch_add(phases.log_ns, std::memory_order_relaxed);
  }

  void handle_exec_branch(const Message& m) {
    LocalTxn txn;
    if (engine_.begin(txn, m.gtid, m.tag) != OpStatus::Ok) {
      reply_branch_result(m, OpStatus::Refused, {});
      return;
    }
    std::vector<ResultRow> rows;
    OpStatus st = OpStatus::Ok;
    for (Key k : m.keys) {
      if (m.op == TxnOp::ReadRows) {
        ResultRow r{k, {}};
        st = engine_.read_row(txn, k, &r.value);
        if (st == OpStatus::Ok) rows.push_back(r);
      } else {
        st = engine_.update_row(txn, k, payload_for_update(k, m.tag));
      }
      if (st != OpStatus::Ok) break;
    }
    if (st != OpStatus::Ok) {
      engine_.abort_local(txn);
      reply_branch_result(m, st, {});
      return;
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      BranchState b;
      b.txn = std::move(txn);
      b.coordinator = m.origin;
      b.created_at = now_ns();
      branches_.emplace(m.gtid, std::move(b));
      open_branches_.fetch_add(1, std::memory_order_relaxed);
    }
    reply_branch_result(m, OpStatus::Ok, std::move(rows));
  }

  // Messages for one gtid arrive strictly ordered by the 2PC causality chain
  // (result before Prepare, vote before Decision), so no two workers handle
  // the same branch concurrently; the map pointer stays valid across rehash.
  void handle_prepare(const Message& m) {
    std::int64_t delay = 0;
    BranchState* b = nullptr;
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (vote_delay_count_ > 0) {
        vote_delay_count_--;
        delay = vote_delay_ns_;
      }
      auto it = branches_.find(m.gtid);
      if (it != branches_.end()) b = &it->second;
    }
    Vote vote = Vote::No;  // unknown branch: exec failed or expired, vote No
    if (b) {
      vote = engine_.prepare_local(b->txn);
      std::lock_guard<std::mutex> lk(mu_);
      if (vote == Vote::Yes) {
        b->prepared = true;
        b->prepared_at = now_ns();
      } else {
        // YesReadOnly and No both finish the branch here.
        branches_.erase(m.gtid);
        open_branches_.fetch_sub(1, std::memory_order_relaxed);
      }
    }
    if (delay > 0) std::this_thread::sleep_for(std::chrono::nanoseconds(delay));
    Message v;
    v.kind = MsgKind::Vote;
    v.gtid = m.gtid;
    v.origin = id_;
    v.destination = m.origin;
    v.vote = vote;
    ScopedPhaseTimer t(ScopedPhaseTimer::Phase::Comm);
    transport_->send(std::move(v));
  }

  void handle_decision(const Message& m, bool expire_only) {
    BranchState moved;
    bool found = false;
    {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = branches_.find(m.gtid);
      if (it != branches_.end() && !(expire_only && it->second.prepared)) {
        moved = std::move(it->second);
        branches_.erase(it);
        open_branches_.fetch_sub(1, std::memory_order_relaxed);
        found = true;
      }
    }
    if (found) {
      if (m.commit)
        engine_.commit_local(moved.txn);
      else
        engine_.abort_local(moved.txn);
    }
    if (expire_only) return;  // local cleanup, the coordinator is gone
    // Unknown txn: decision already applied (or presumed aborted); ack so the
    // coordinator stops asking.
    Message a;
    a.kind = MsgKind::Ack;
    a.gtid = m.gtid;
    a.origin = id_;
    a.destination = m.origin;
    ScopedPhaseTimer t(ScopedPhaseTimer::Phase::Comm);
    transport_->send(std::move(a));
  }

  void reply_branch_result(const Message& m, OpStatus st, std::vector<ResultRow>&& rows) {
    Message r;
    r.kind = MsgKind::BranchResult;
    r.gtid = m.gtid;
    r.origin = id_;
    r.destination = m.origin;
    r.status = st;
    r.rows = std::move(rows);
    ScopedPhaseTimer t(ScopedPhaseTimer::Phase::Comm);
    transport_->send(std::move(r));
  }

  void send_decision(Gtid gtid, InstanceId to, bool commit) {
    Message d;
    d.kind = MsgKind::Decision;
    d.gtid = gtid;
    d.origin = id_;
    d.destination = to;
    d.commit = commit;
    ScopedPhaseTimer t(ScopedPhaseTimer::Phase::Comm);
    transport_->send(std::move(d));
  }

  // ---- client request execution -------------------------------------------

  void run_request(TxnRequest&& req, WorkerStats& stats) {
    std::vector<Key> keys = req.keys;
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    SiteClassification cls = classify(req, *pmap_);

    TxnResult result;
    std::int64_t first_start = now_ns();
    std::uint32_t attempts = 0;
    for (;;) {
      // Branch duty first: remote transactions may be blocked on this worker.
      WorkItem work;
      while (pop_work(work)) execute_work(std::move(work), stats);

      attempts++;
      result.rows.clear();
      AttemptPhases phases;
      tls_attempt_phases = &phases;
      std::int64_t t0 = now_ns();
      AttemptOutcome out;
      if (cls.kind == SiteClass::Distributed)
        out = attempt_distributed(req, keys, cls, result, stats);
      else
        out = attempt_local(req, keys, result);
      std::int64_t dur = now_ns() - t0;
      tls_attempt_phases = nullptr;

      std::uint64_t overhead = phases.comm_ns + phases.log_ns + phases.nested_ns;
      std::uint64_t owned = static_cast<std::uint64_t>(dur) > overhead
                                ? static_cast<std::uint64_t>(dur) - overhead
                                : 0;
      stats.comm_ns.fetch_add(phases.comm_ns, std::memory_order_relaxed);
      stats.log_ns.fetch_add(phases.log_ns, std::memory_order_relaxed);
      if (out == AttemptOutcome::Committed) {
        stats.work_ns.fetch_add(owned, std::memory_order_relaxed);
        stats.committed.fetch_add(1, std::memory_order_relaxed);
        stats.latency.record_ns(static_cast<std::uint64_t>(now_ns() - first_start));
        result.committed = true;
        result.attempts = attempts;
        break;
      }
      if (out == AttemptOutcome::Refused) {
        result.committed = false;
        result.attempts = attempts;
        break;
      }
      // Wasted attempt: contention time, minus what went to comm and log.
      stats.lockwait_ns.fetch_add(owned, std::memory_order_relaxed);
      stats.aborted_attempts.fetch_add(1, std::memory_order_relaxed);
      if (attempts % 8 == 0) std::this_thread::yield();
    }
    if (req.done) req.done->set_value(std::move(result));
  }

  enum class AttemptOutcome { Committed, Aborted, Refused };

  AttemptOutcome attempt_local(const TxnRequest& req, const std::vector<Key>& keys,
                               TxnResult& result) {
    bool force_locks = open_branches_.load(std::memory_order_relaxed) > 0;
    LocalTxn txn;
    if (engine_.begin(txn, 0, req.tag, force_locks) != OpStatus::Ok)
      return AttemptOutcome::Refused;
    for (Key k : keys) {
      OpStatus st;
      if (req.op == TxnOp::ReadRows) {
        ResultRow r{k, {}};
        st = engine_.read_row(txn, k, &r.value);
        if (st == OpStatus::Ok && req.done) result.rows.push_back(r);
      } else {
        st = engine_.update_row(txn, k, payload_for_update(k, req.tag));
      }
      if (st != OpStatus::Ok) {
        engine_.abort_local(txn);
        return AttemptOutcome::Aborted;
      }
    }
    std::uint64_t stamp = trace_->next_stamp();
    engine_.commit_local(txn);
    if (trace_->recording_commits())
      trace_->record_commit(
          CommitRecord{stamp, 0, req.tag, req.op == TxnOp::UpdateRows, keys});
    result.stamp = stamp;
    return AttemptOutcome::Committed;
  }

  AttemptOutcome attempt_distributed(const TxnRequest& req, const std::vector<Key>& keys,
                                     const SiteClassification& cls, TxnResult& result,
                                     WorkerStats& stats) {
    Gtid gtid = trace_->next_gtid();
    std::vector<InstanceId> remotes;
    std::vector<std::vector<Key>> remote_keys;
    std::vector<Key> own_keys;
    for (InstanceId p : cls.participants) {
      if (p == id_) continue;
      remotes.push_back(p);
      remote_keys.emplace_back();
    }
    for (Key k : keys) {
      InstanceId p = pmap_->owner_of(k);
      if (p == id_) {
        own_keys.push_back(k);
      } else {
        std::size_t i = static_cast<std::size_t>(
            std::find(remotes.begin(), remotes.end(), p) - remotes.begin());
        remote_keys[i].push_back(k);
      }
    }

    {
      std::lock_guard<std::mutex> lk(mu_);
      auto c = std::make_unique<CoordState>();
      c->awaiting_results = remotes.size();
      coord_.emplace(gtid, std::move(c));
    }

    bool send_failed = false;
    for (std::size_t i = 0; i < remotes.size(); ++i) {
      Message m;
      m.kind = MsgKind::ExecBranch;
      m.gtid = gtid;
      m.origin = id_;
      m.destination = remotes[i];
      m.tag = req.tag;
      m.op = req.op;
      m.keys = remote_keys[i];
      ScopedPhaseTimer t(ScopedPhaseTimer::Phase::Comm);
      if (!transport_->send(std::move(m))) send_failed = true;
    }

    // Local branch overlaps with remote execution.
    LocalTxn own;
    bool own_active = false;
    bool own_failed = false;
    bool refused = false;
    if (!own_keys.empty()) {
      if (engine_.begin(own, gtid, req.tag) != OpStatus::Ok) {
        own_failed = true;
        refused = true;
      } else {
        own_active = true;
        for (Key k : own_keys) {
          OpStatus st;
          if (req.op == TxnOp::ReadRows) {
            ResultRow r{k, {}};
            st = engine_.read_row(own, k, &r.value);
            if (st == OpStatus::Ok && req.done) result.rows.push_back(r);
          } else {
            st = engine_.update_row(own, k, payload_for_update(k, req.tag));
          }
          if (st != OpStatus::Ok) {
            own_failed = true;
            break;
          }
        }
      }
    }

    bool exec_ok = !send_failed && !own_failed &&
                   wait_coord(gtid, now_ns() + tuning_.exec_timeout_ns, stats,
                              [](const CoordState& c) {
                                return c.awaiting_results == 0 || c.exec_failed;
                              });
    if (exec_ok) {
      std::lock_guard<std::mutex> lk(mu_);
      exec_ok = !coord_.at(gtid)->exec_failed;
    }

    if (!exec_ok) {
      for (InstanceId p : remotes) send_decision(gtid, p, false);
      if (own_active) engine_.abort_local(own);
      trace_->record_decision(gtid, false);
      unregister_coord(gtid);
      return refused || send_failed ? AttemptOutcome::Refused : AttemptOutcome::Aborted;
    }

    // Phase one.
    {
      std::lock_guard<std::mutex> lk(mu_);
      CoordState* cs = coord_.at(gtid).get();
      cs->phase = 1;
      cs->awaiting_votes = remotes.size();
    }
    for (InstanceId p : remotes) {
      Message m;
      m.kind = MsgKind::Prepare;
      m.gtid = gtid;
      m.origin = id_;
      m.destination = p;
      ScopedPhaseTimer t(ScopedPhaseTimer::Phase::Comm);
      if (!transport_->send(std::move(m))) send_failed = true;
    }
    bool own_finished = false;
    if (own_active) {
      Vote v = engine_.prepare_local(own);
      if (v == Vote::No) {
        own_failed = true;
        own_finished = true;  // prepare_local aborted it already
      } else if (v == Vote::YesReadOnly) {
        own_finished = true;  // committed and released already
      }
    }

    bool votes_ok = !send_failed && !own_failed &&
                    wait_coord(gtid, now_ns() + tuning_.vote_timeout_ns, stats,
                               [](const CoordState& c) {
                                 return c.awaiting_votes == 0 || c.any_no;
                               });
    std::vector<InstanceId> yes;
    if (votes_ok) {
      std::lock_guard<std::mutex> lk(mu_);
      CoordState* cs = coord_.at(gtid).get();
      votes_ok = !cs->any_no;
      yes = cs->yes_participants;
    }

    if (!votes_ok) {
      for (InstanceId p : remotes) send_decision(gtid, p, false);
      if (own_active && !own_finished) engine_.abort_local(own);
      trace_->record_decision(gtid, false);
      unregister_coord(gtid);
      return send_failed ? AttemptOutcome::Refused : AttemptOutcome::Aborted;
    }

    // Decided commit. Stamp before any branch releases its locks.
    std::uint64_t stamp = trace_->next_stamp();
    {
      std::lock_guard<std::mutex> lk(mu_);
      CoordState* cs = coord_.at(gtid).get();
      cs->phase = 2;
      cs->awaiting_acks = yes.size();
    }
    for (InstanceId p : yes) send_decision(gtid, p, true);
    if (own_active && !own_finished) engine_.commit_local(own);

    wait_coord(gtid, now_ns() + tuning_.ack_timeout_ns, stats,
               [](const CoordState& c) { return c.awaiting_acks == 0; });

    {
      ScopedPhaseTimer t(ScopedPhaseTimer::Phase::Log);
      engine_.wal().append(own_active ? own.id : 0, gtid, LogKind::EndDistributed, 0,
                           nullptr, nullptr);
    }
    trace_->record_decision(gtid, true);
    if (trace_->recording_commits())
      trace_->record_commit(
          CommitRecord{stamp, gtid, req.tag, req.op == TxnOp::UpdateRows, keys});
    if (req.done) {
      std::lock_guard<std::mutex> lk(mu_);
      CoordState* cs = coord_.at(gtid).get();
      result.rows.insert(result.rows.end(), cs->rows.begin(), cs->rows.end());
    }
    unregister_coord(gtid);
    result.gtid = gtid;
    result.stamp = stamp;
    return AttemptOutcome::Committed;
  }

  // Wait for a coordinator condition, executing queued branch work in the
  // meantime so single-worker instances cannot starve each other. Blocking
  // time counts as communication; nested work accounts for itself.
  bool wait_coord(Gtid gtid, std::int64_t deadline, WorkerStats& stats,
                  bool (*pred)(const CoordState&)) {
    for (;;) {
      WorkItem work;
      bool have_work = false;
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (pred(*coord_.at(gtid))) return true;
        if (now_ns() >= deadline) return false;
        if (!running_) return false;
        if (!work_q_.empty()) {
          work = std::move(work_q_.front());
          work_q_.pop_front();
          have_work = true;
        } else {
          std::int64_t t0 = now_ns();
          cv_.wait_for(lk, std::chrono::nanoseconds(
                               std::min(deadline - t0, tuning_.idle_wait_ns)));
          if (tls_attempt_phases)
            tls_attempt_phases->comm_ns += static_cast<std::uint64_t>(now_ns() - t0);
        }
      }
      if (have_work) execute_work(std::move(work), stats);
    }
  }

  void unregister_coord(Gtid gtid) {
    std::lock_guard<std::mutex> lk(mu_);
    coord_.erase(gtid);
  }

  InstanceId id_;
  StorageEngine engine_;
  Transport* transport_;
  const PartitionMap* pmap_;
  AuditTrace* trace_;
  RuntimeTuning tuning_;
  std::uint32_t n_workers_;
  std::vector<std::unique_ptr<WorkerStats>> worker_stats_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable client_not_full_;
  std::deque<TxnRequest> client_q_;
  std::deque<WorkItem> work_q_;
  std::unordered_map<Gtid, std::unique_ptr<CoordState>> coord_;
  std::unordered_map<Gtid, BranchState> branches_;
  std::atomic<int> open_branches_{0};
  std::vector<Generator> generators_;
  bool running_ = true;
  bool accepting_ = true;
  std::uint32_t active_requests_ = 0;
  std::uint32_t vote_delay_count_ = 0;
  std::int64_t vote_delay_ns_ = 0;
  std::thread dispatcher_;
};

}  // namespace isl
