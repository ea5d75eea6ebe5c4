#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <vector>

#include "isl/common.hpp"

namespace isl {

// Latency histogram: 16 linear sub-buckets per power-of-two octave of
// microseconds, good to ~6% relative error up to ~4000 s.
class LatencyHistogram {
 public:
  static constexpr std::size_t octaves = 32;
  static constexpr std::size_t subbuckets = 16;
  static constexpr std::size_t bucket_count = octaves * subbuckets;

  void record_ns(std::uint64_t ns) {
    std::uint64_t us = ns / 1000;
    buckets_[index_of(us)].fetch_add(1, std::memory_order_relaxed);
  }

  static std::size_t index_of(std::uint64_t us) {
    if (us < subbuckets) return static_cast<std::size_t>(us);
    unsigned exp = 63u - static_cast<unsigned>(__builtin_clzll(us));
    std::uint64_t sub = (us >> (exp - 4)) & (subbuckets - 1);
    std::size_t idx = (exp - 3) * subbuckets + static_cast<std::size_t>(sub);
    return idx < bucket_count ? idx : bucket_count - 1;
  }

  // Representative value (µs) for a bucket: lower edge.
  static double value_of(std::size_t idx) {
    if (idx < subbuckets) return static_cast<double>(idx);
    std::size_t exp = idx / subbuckets + 3;
    std::size_t sub = idx % subbuckets;
    return static_cast<double>((1ull << exp) + (sub << (exp - 4)));
  }

  std::uint64_t bucket(std::size_t i) const {
    return buckets_[i].load(std::memory_order_relaxed);
  }

 private:
  std::array<std::atomic<std::uint64_t>, bucket_count> buckets_{};
};

// Monotonic per-worker counters. Workers only add; the orchestrator reads
// start/end snapshots, so no reset path exists.
struct alignas(64) WorkerStats {
  std::atomic<std::uint64_t> committed{0};
  std::atomic<std::uint64_t> aborted_attempts{0};
  std::atomic<std::uint64_t> work_ns{0};
  std::atomic<std::uint64_t> comm_ns{0};
  std::atomic<std::uint64_t> log_ns{0};
  std::atomic<std::uint64_t> lockwait_ns{0};
  LatencyHistogram latency;
};

struct StatsSnapshot {
  std::uint64_t committed = 0;
  std::uint64_t aborted = 0;
  std::uint64_t work_ns = 0;
  std::uint64_t comm_ns = 0;
  std::uint64_t log_ns = 0;
  std::uint64_t lockwait_ns = 0;
  std::array<std::uint64_t, LatencyHistogram::bucket_count> hist{};

  static StatsSnapshot take(const std::vector<WorkerStats*>& all) {
    StatsSnapshot s;
    for (const WorkerStats* w : all) {
      s.committed += w->committed.load(std::memory_order_relaxed);
      s.aborted += w->aborted_attempts.load(std::memory_order_relaxed);
      s.work_ns += w->work_ns.load(std::memory_order_relaxed);
      s.comm_ns += w->comm_ns.load(std::memory_order_relaxed);
      s.log_ns += w->log_ns.load(std::memory_order_relaxed);
      s.lockwait_ns += w->lockwait_ns.load(std::memory_order_relaxed);
      for (std::size_t i = 0; i < LatencyHistogram::bucket_count; ++i)
        s.hist[i] += w->latency.bucket(i);
    }
    return s;
  }
};

// Phase accounting for the transaction attempt currently running on this
// thread. Storage and transport code add into it when present; the worker
// loop folds it into WorkerStats when the attempt ends. nested_ns is time
// spent executing unrelated branch work inside this attempt's wall time;
// that work accounts for itself.
struct AttemptPhases {
  std::uint64_t comm_ns = 0;
  std::uint64_t log_ns = 0;
  std::uint64_t nested_ns = 0;
};

inline thread_local AttemptPhases* tls_attempt_phases = nullptr;

class ScopedPhaseTimer {
 public:
  enum class Phase { Comm, Log };
  explicit ScopedPhaseTimer(Phase p) : phase_(p) {
    if (tls_attempt_phases) t0_ = now_ns();
  }
  ~ScopedPhaseTimer() {
    if (tls_attempt_phases) {
      std::uint64_t dt = static_cast<std::uint64_t>(now_ns() - t0_);
      if (phase_ == Phase::Comm)
        tls_attempt_phases->comm_ns += dt;
      else
        tls_attempt_phases->log_ns += dt;
    }
  }

 private:
  Phase phase_;
  std::int64_t t0_ = 0;
};

}  // namespace isl
