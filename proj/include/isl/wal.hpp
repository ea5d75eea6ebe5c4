#pragma once

#include <cstdio>
#include <mutex>
#include <string>
#include <vector>

#include "isl/common.hpp"

namespace isl {

enum class LogKind : std::uint8_t {
  Update = 0,
  Commit = 1,
  Abort = 2,
  Prepare = 3,
  EndDistributed = 4,
};

inline const char* to_string(LogKind k) {
  switch (k) {
    case LogKind::Update: return "update";
    case LogKind::Commit: return "commit";
    case LogKind::Abort: return "abort";
    case LogKind::Prepare: return "prepare";
    case LogKind::EndDistributed: return "end_distributed";
  }
  return "?";
}

struct LogRecord {
  std::uint64_t lsn = 0;
  TxnId txn = 0;
  Gtid gtid = 0;  // 0 for purely local transactions
  LogKind kind = LogKind::Update;
  Key key = 0;
  Payload before{};
  Payload after{};
};

struct WalOptions {
  bool retain_all = true;
  std::size_t ring_capacity = 1 << 15;
  std::string file_path;  // empty = no file sink
};

// Append-only log. "Flush" is a synchronous append acknowledgment: the
// record is in the buffer (and written through to the file sink, if open)
// before the call returns. Retention is either everything (replay tests)
// or a bounded ring that keeps append cost identical while capping memory.
class Wal {
 public:
  using Options = WalOptions;

  explicit Wal(Options opt = Options{}) : opt_(opt) {
    if (!opt_.retain_all) ring_.resize(opt_.ring_capacity);
    if (!opt_.file_path.empty()) {
      file_ = std::fopen(opt_.file_path.c_str(), "wb");
      if (!file_) throw std::runtime_error("wal: cannot open " + opt_.file_path);
    }
  }

  Wal(const Wal&) = delete;
  Wal& operator=(const Wal&) = delete;

  ~Wal() {
    if (file_) std::fclose(file_);
  }

  // Returns the record's LSN. Throws on file-sink I/O failure and when a
  // test has armed fail_next_flush.
  std::uint64_t append(TxnId txn, Gtid gtid, LogKind kind, Key key,
                       const Payload* before = nullptr, const Payload* after = nullptr) {
    std::lock_guard<std::mutex> g(mu_);
    if (fail_next_flush_) {
      fail_next_flush_ = false;
      throw std::runtime_error("wal: injected flush failure");
    }
    LogRecord r;
    r.lsn = ++lsn_;
    r.txn = txn;
    r.gtid = gtid;
    r.kind = kind;
    r.key = key;
    if (before) r.before = *before;
    if (after) r.after = *after;
    if (file_) write_file(r);
    bytes_ += sizeof(LogRecord);
    if (opt_.retain_all) {
      records_.push_back(r);
    } else {
      ring_[(r.lsn - 1) % opt_.ring_capacity] = r;
    }
    return r.lsn;
  }

  std::uint64_t last_lsn() const {
    std::lock_guard<std::mutex> g(mu_);
    return lsn_;
  }

  std::uint64_t bytes_appended() const {
    std::lock_guard<std::mutex> g(mu_);
    return bytes_;
  }

  // Full copy of the retained log, in LSN order. Empty unless retain_all.
  std::vector<LogRecord> records() const {
    std::lock_guard<std::mutex> g(mu_);
    return records_;
  }

  void arm_flush_failure() {
    std::lock_guard<std::mutex> g(mu_);
    fail_next_flush_ = true;
  }

 private:
  void write_file(const LogRecord& r) {
    auto put = [&](const void* p, std::size_t n) {
      if (std::fwrite(p, 1, n, file_) != n)
        throw std::runtime_error("wal: file sink write failed");
    };
    std::uint8_t kind = static_cast<std::uint8_t>(r.kind);
    put(&r.lsn, 8);
    put(&r.txn, 8);
    put(&r.gtid, 8);
    put(&kind, 1);
    put(&r.key, 8);
    put(r.before.data(), payload_bytes);
    put(r.after.data(), payload_bytes);
    if (std::fflush(file_) != 0) throw std::runtime_error("wal: file sink flush failed");
  }

  Options opt_;
  mutable std::mutex mu_;
  std::uint64_t lsn_ = 0;
  std::uint64_t bytes_ = 0;
  bool fail_next_flush_ = false;
  std::vector<LogRecord> records_;
  std::vector<LogRecord> ring_;
  std::FILE* file_ = nullptr;
};

}  // namespace isl
