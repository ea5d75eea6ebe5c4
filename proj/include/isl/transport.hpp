#pragma once

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "isl/common.hpp"
#include "isl/metrics.hpp"
#include "isl/storage.hpp"
#include "isl/topology.hpp"
#include "isl/trace.hpp"

namespace isl {

enum class MsgKind : std::uint8_t {
  ExecBranch = 1,
  BranchResult = 2,
  Prepare = 3,
  Vote = 4,
  Decision = 5,
  Ack = 6,
};

inline const char* to_string(MsgKind k) {
  switch (k) {
    case MsgKind::ExecBranch: return "exec_branch";
    case MsgKind::BranchResult: return "branch_result";
    case MsgKind::Prepare: return "prepare";
    case MsgKind::Vote: return "vote";
    case MsgKind::Decision: return "decision";
    case MsgKind::Ack: return "ack";
  }
  return "?";
}

enum class TxnOp : std::uint8_t { ReadRows = 0, UpdateRows = 1 };

struct ResultRow {
  Key key;
  Payload value;
};

// Update payloads are not carried on the wire: both sides derive them from
// (key, tag), so an ExecBranch is just the op and the key list.
struct Message {
  MsgKind kind = MsgKind::Ack;
  Gtid gtid = 0;
  InstanceId origin = 0;
  InstanceId destination = 0;

  // ExecBranch
  std::uint64_t tag = 0;
  TxnOp op = TxnOp::ReadRows;
  std::vector<Key> keys;
  // BranchResult
  OpStatus status = OpStatus::Ok;
  std::vector<ResultRow> rows;
  // Vote
  Vote vote = Vote::Yes;
  // Decision
  bool commit = false;

  // Transport metadata, not part of the wire encoding.
  std::int64_t sent_at = 0;
  std::int64_t deliver_at = 0;
};

// ---------------------------------------------------------------------------
// Wire encoding. Frame = 4-byte little-endian body length, then the body:
// kind u8, gtid u64, origin u32, destination u32, tag u64, op u8, status u8,
// vote u8, commit u8, n_keys u16, n_keys * (key u64), n_rows u16,
// n_rows * (key u64, payload 100 bytes). All integers little-endian.
// Fields a kind does not use are present and zero, keeping offsets fixed.
// ---------------------------------------------------------------------------

namespace wire {

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

  std::uint8_t u8() {
    need(1);
    return p_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(p_[pos_] | (p_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  void bytes(std::uint8_t* out, std::size_t n) {
    need(n);
    std::memcpy(out, p_ + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == n_; }

 private:
  void need(std::size_t n) {
    if (pos_ + n > n_) throw std::runtime_error("wire: truncated message");
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace wire

inline constexpr std::size_t wire_max_keys = 4096;
inline constexpr std::size_t wire_max_body = 1u << 20;

inline std::vector<std::uint8_t> encode_message(const Message& m) {
  if (m.keys.size() > wire_max_keys || m.rows.size() > wire_max_keys)
    throw std::invalid_argument("wire: too many keys");
  std::vector<std::uint8_t> b;
  b.reserve(32 + m.keys.size() * 8 + m.rows.size() * (8 + payload_bytes));
  b.push_back(static_cast<std::uint8_t>(m.kind));
  wire::put_u64(b, m.gtid);
  wire::put_u32(b, m.origin);
  wire::put_u32(b, m.destination);
  wire::put_u64(b, m.tag);
  b.push_back(static_cast<std::uint8_t>(m.op));
  b.push_back(static_cast<std::uint8_t>(m.status));
  b.push_back(static_cast<std::uint8_t>(m.vote));
  b.push_back(m.commit ? 1 : 0);
  wire::put_u16(b, static_cast<std::uint16_t>(m.keys.size()));
  for (Key k : m.keys) wire::put_u64(b, k);
  wire::put_u16(b, static_cast<std::uint16_t>(m.rows.size()));
  for (const ResultRow& r : m.rows) {
    wire::put_u64(b, r.key);
    b.insert(b.end(), r.value.begin(), r.value.end());
  }
  return b;
}

inline Message decode_message(const std::uint8_t* data, std::size_t size) {
  if (size > wire_max_body) throw std::runtime_error("wire: oversized message");
  wire::Reader r(data, size);
  Message m;
  std::uint8_t kind = r.u8();
  if (kind < 1 || kind > 6) throw std::runtime_error("wire: bad kind");
  m.kind = static_cast<MsgKind>(kind);
  m.gtid = r.u64();
  m.origin = r.u32();
  m.destination = r.u32();
  m.tag = r.u64();
  std::uint8_t op = r.u8();
  if (op > 1) throw std::runtime_error("wire: bad op");
  m.op = static_cast<TxnOp>(op);
  std::uint8_t status = r.u8();
  if (status > 4) throw std::runtime_error("wire: bad status");
  m.status = static_cast<OpStatus>(status);
  std::uint8_t vote = r.u8();
  if (vote > 2) throw std::runtime_error("wire: bad vote");
  m.vote = static_cast<Vote>(vote);
  std::uint8_t commit = r.u8();
  if (commit > 1) throw std::runtime_error("wire: bad commit flag");
  m.commit = commit != 0;
  std::uint16_t n_keys = r.u16();
  if (n_keys > wire_max_keys) throw std::runtime_error("wire: too many keys");
  m.keys.resize(n_keys);
  for (std::uint16_t i = 0; i < n_keys; ++i) m.keys[i] = r.u64();
  std::uint16_t n_rows = r.u16();
  if (n_rows > wire_max_keys) throw std::runtime_error("wire: too many rows");
  m.rows.resize(n_rows);
  for (std::uint16_t i = 0; i < n_rows; ++i) {
    m.rows[i].key = r.u64();
    r.bytes(m.rows[i].value.data(), payload_bytes);
  }
  if (!r.done()) throw std::runtime_error("wire: trailing bytes");
  return m;
}

inline std::vector<std::uint8_t> encode_frame(const Message& m) {
  std::vector<std::uint8_t> body = encode_message(m);
  std::vector<std::uint8_t> f;
  f.reserve(4 + body.size());
  wire::put_u32(f, static_cast<std::uint32_t>(body.size()));
  f.insert(f.end(), body.begin(), body.end());
  return f;
}

// ---------------------------------------------------------------------------
// Transport interface: one logical receiver per instance (its dispatcher),
// any number of concurrent senders.
// ---------------------------------------------------------------------------

class Transport {
 public:
  virtual ~Transport() = default;

  // False once closed; the caller surfaces that as a transaction abort.
  virtual bool send(Message m) = 0;

  // Earliest deliverable message for `self`, waiting until deadline_ns
  // (absolute, Clock epoch). False on timeout or close-with-empty-queue.
  virtual bool recv(InstanceId self, Message& out, std::int64_t deadline_ns) = 0;

  virtual void close() = 0;

  virtual std::uint64_t sent_count() const = 0;
  virtual std::uint64_t received_count() const = 0;
  virtual std::uint64_t pending_count() const = 0;
};

namespace detail {

// Per-destination mailbox holding one FIFO lane per source, so per-pair order
// is preserved while delivery across lanes follows deliver_at.
class Inbox {
 public:
  explicit Inbox(std::size_t n_sources, std::size_t capacity)
      : lanes_(n_sources), capacity_(capacity) {}

  bool push(std::size_t src, Message&& m) {
    std::unique_lock<std::mutex> lk(mu_);
    not_full_.wait(lk, [&] { return closed_ || lanes_[src].size() < capacity_; });
    if (closed_) return false;
    lanes_[src].push_back(std::move(m));
    ready_.notify_all();
    return true;
  }

  bool pop(Message& out, std::int64_t deadline_ns) {
    std::unique_lock<std::mutex> lk(mu_);
    for (;;) {
      std::int64_t now = now_ns();
      int best = -1;
      std::int64_t best_at = 0;
      std::int64_t next_at = 0;
      for (std::size_t i = 0; i < lanes_.size(); ++i) {
        if (lanes_[i].empty()) continue;
        std::int64_t at = lanes_[i].front().deliver_at;
        if (at <= now) {
          if (best < 0 || at < best_at) {
            best = static_cast<int>(i);
            best_at = at;
          }
        } else if (next_at == 0 || at < next_at) {
          next_at = at;
        }
      }
      if (best >= 0) {
        out = std::move(lanes_[best].front());
        lanes_[best].pop_front();
        not_full_.notify_all();
        return true;
      }
      if (closed_) return false;
      std::int64_t wake = deadline_ns;
      if (next_at != 0 && next_at < wake) wake = next_at;
      if (wake <= now) return false;
      ready_.wait_for(lk, std::chrono::nanoseconds(wake - now));
    }
  }

  void close() {
    std::lock_guard<std::mutex> g(mu_);
    closed_ = true;
    ready_.notify_all();
    not_full_.notify_all();
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> g(mu_);
    std::size_t n = 0;
    for (const auto& l : lanes_) n += l.size();
    return n;
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable ready_;
  std::condition_variable not_full_;
  std::vector<std::deque<Message>> lanes_;
  std::size_t capacity_;
  bool closed_ = false;
};

}  // namespace detail

// In-process mesh. latency_ns[src][dst] is added to every message's delivery
// time; a zero matrix gives immediate delivery.
class InProcessTransport : public Transport {
 public:
  InProcessTransport(std::uint32_t n_instances,
                     std::vector<std::vector<std::int64_t>> latency_ns,
                     std::size_t capacity = 1024, AuditTrace* trace = nullptr)
      : n_(n_instances), latency_(std::move(latency_ns)), trace_(trace) {
    if (latency_.size() != n_) throw std::invalid_argument("transport: latency matrix shape");
    for (const auto& row : latency_)
      if (row.size() != n_) throw std::invalid_argument("transport: latency matrix shape");
    inboxes_.reserve(n_);
    for (std::uint32_t i = 0; i < n_; ++i)
      inboxes_.push_back(std::make_unique<detail::Inbox>(n_, capacity));
  }

  static std::vector<std::vector<std::int64_t>> zero_latency(std::uint32_t n) {
    return std::vector<std::vector<std::int64_t>>(n, std::vector<std::int64_t>(n, 0));
  }

  bool send(Message m) override {
    if (m.origin >= n_ || m.destination >= n_)
      throw std::invalid_argument("transport: bad endpoint");
    if (closed_.load(std::memory_order_acquire)) return false;
    m.sent_at = now_ns();
    m.deliver_at = m.sent_at + latency_[m.origin][m.destination];
    InstanceId dst = m.destination;
    InstanceId src = m.origin;
    Gtid gtid = m.gtid;
    if (!inboxes_[dst]->push(src, std::move(m))) return false;
    sent_.fetch_add(1, std::memory_order_relaxed);
    if (trace_) trace_->count_message(gtid);
    return true;
  }

  bool recv(InstanceId self, Message& out, std::int64_t deadline_ns) override {
    if (self >= n_) throw std::invalid_argument("transport: bad endpoint");
    if (!inboxes_[self]->pop(out, deadline_ns)) return false;
    received_.fetch_add(1, std::memory_order_relaxed);
    return true;
  }

  void close() override {
    closed_.store(true, std::memory_order_release);
    for (auto& ib : inboxes_) ib->close();
  }

  std::uint64_t sent_count() const override { return sent_.load(std::memory_order_relaxed); }
  std::uint64_t received_count() const override {
    return received_.load(std::memory_order_relaxed);
  }
  std::uint64_t pending_count() const override {
    std::size_t n = 0;
    for (const auto& ib : inboxes_) n += ib->size();
    return n;
  }

 private:
  std::uint32_t n_;
  std::vector<std::vector<std::int64_t>> latency_;
  AuditTrace* trace_;
  std::vector<std::unique_ptr<detail::Inbox>> inboxes_;
  std::atomic<bool> closed_{false};
  std::atomic<std::uint64_t> sent_{0};
  std::atomic<std::uint64_t> received_{0};
};

// Unix-domain stream sockets, one socketpair per unordered instance pair and
// one reader thread per instance that reassembles frames into the local
// inbox. No latency injection: delivery time is arrival time.
class DomainSocketTransport : public Transport {
 public:
  explicit DomainSocketTransport(std::uint32_t n_instances, std::size_t capacity = 1024,
                                 AuditTrace* trace = nullptr)
      : n_(n_instances), trace_(trace) {
    fds_.assign(n_, std::vector<int>(n_, -1));
    send_mu_ = std::vector<std::mutex>(n_ * n_);
    inboxes_.reserve(n_);
    for (std::uint32_t i = 0; i < n_; ++i)
      inboxes_.push_back(std::make_unique<detail::Inbox>(n_, capacity));
    for (std::uint32_t i = 0; i < n_; ++i) {
      for (std::uint32_t j = i + 1; j < n_; ++j) {
        int sv[2];
        if (::socketpair(AF_UNIX, SOCK_STREAM, 0, sv) != 0)
          throw std::runtime_error("transport: socketpair failed");
        fds_[i][j] = sv[0];
        fds_[j][i] = sv[1];
      }
    }
    readers_.reserve(n_);
    for (std::uint32_t i = 0; i < n_; ++i)
      readers_.emplace_back([this, i] { reader_loop(i); });
  }

  ~DomainSocketTransport() override { close(); }

  bool send(Message m) override {
    if (m.origin >= n_ || m.destination >= n_ || m.origin == m.destination)
      throw std::invalid_argument("transport: bad endpoint");
    if (closed_.load(std::memory_order_acquire)) return false;
    m.sent_at = now_ns();
    std::vector<std::uint8_t> frame = encode_frame(m);
    int fd = fds_[m.origin][m.destination];
    {
      std::lock_guard<std::mutex> g(send_mu_[m.origin * n_ + m.destination]);
      std::size_t off = 0;
      while (off < frame.size()) {
        ssize_t w = ::write(fd, frame.data() + off, frame.size() - off);
        if (w <= 0) return false;
        off += static_cast<std::size_t>(w);
      }
    }
    if (trace_) trace_->count_message(m.gtid);
    sent_.fetch_add(1, std::memory_order_relaxed);
    return true;
  }

  bool recv(InstanceId self, Message& out, std::int64_t deadline_ns) override {
    if (self >= n_) throw std::invalid_argument("transport: bad endpoint");
    if (!inboxes_[self]->pop(out, deadline_ns)) return false;
    received_.fetch_add(1, std::memory_order_relaxed);
    return true;
  }

  void close() override {
    bool was = closed_.exchange(true, std::memory_order_acq_rel);
    if (!was) {
      for (std::uint32_t i = 0; i < n_; ++i)
        for (std::uint32_t j = 0; j < n_; ++j)
          if (fds_[i][j] >= 0) ::shutdown(fds_[i][j], SHUT_RDWR);
      for (auto& t : readers_)
        if (t.joinable()) t.join();
      for (std::uint32_t i = 0; i < n_; ++i)
        for (std::uint32_t j = 0; j < n_; ++j)
          if (fds_[i][j] >= 0) {
            ::close(fds_[i][j]);
            fds_[i][j] = -1;
          }
      for (auto& ib : inboxes_) ib->close();
    }
  }

  std::uint64_t sent_count() const override { return sent_.load(std::memory_order_relaxed); }
  std::uint64_t received_count() const override {
    return received_.load(std::memory_order_relaxed);
  }
  std::uint64_t pending_count() const override {
    std::size_t n = 0;
    for (const auto& ib : inboxes_) n += ib->size();
    return n;
  }

 private:
  void reader_loop(std::uint32_t self) {
    std::vector<std::uint32_t> peers;
    for (std::uint32_t j = 0; j < n_; ++j)
      if (j != self) peers.push_back(j);
    if (peers.empty()) return;
    std::vector<std::vector<std::uint8_t>> buf(peers.size());
    std::vector<pollfd> pfds(peers.size());
    for (std::size_t i = 0; i < peers.size(); ++i)
      pfds[i] = pollfd{fds_[self][peers[i]], POLLIN, 0};
    std::size_t open = peers.size();
    while (open > 0) {
      int rc = ::poll(pfds.data(), pfds.size(), 100);
      if (rc < 0) {
        if (errno == EINTR) continue;
        break;
      }
      if (closed_.load(std::memory_order_acquire)) break;
      if (rc == 0) continue;
      for (std::size_t i = 0; i < peers.size(); ++i) {
        if (pfds[i].fd < 0 || !(pfds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
        std::uint8_t chunk[16384];
        ssize_t r = ::read(pfds[i].fd, chunk, sizeof chunk);
        if (r <= 0) {
          pfds[i].fd = -1;
          --open;
          continue;
        }
        auto& b = buf[i];
        b.insert(b.end(), chunk, chunk + r);
        std::size_t pos = 0;
        while (b.size() - pos >= 4) {
          std::uint32_t len = 0;
          for (int k = 0; k < 4; ++k)
            len |= static_cast<std::uint32_t>(b[pos + k]) << (8 * k);
          if (len > wire_max_body) {
            pfds[i].fd = -1;
            --open;
            break;
          }
          if (b.size() - pos - 4 < len) break;
          bool ok = true;
          try {
            Message m = decode_message(b.data() + pos + 4, len);
            m.deliver_at = now_ns();
            inboxes_[self]->push(peers[i], std::move(m));
          } catch (const std::exception&) {
            ok = false;  // malformed peer stream, drop the connection
          }
          if (!ok) {
            pfds[i].fd = -1;
            --open;
            break;
          }
          pos += 4 + len;
        }
        if (pos > 0) b.erase(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(pos));
      }
    }
  }

  std::uint32_t n_;
  AuditTrace* trace_;
  std::vector<std::vector<int>> fds_;
  std::vector<std::mutex> send_mu_;
  std::vector<std::unique_ptr<detail::Inbox>> inboxes_;
  std::vector<std::thread> readers_;
  std::atomic<bool> closed_{false};
  std::atomic<std::uint64_t> sent_{0};
  std::atomic<std::uint64_t> received_{0};
};

enum class IpcMechanism { InProcessChannel, DomainSocket };

inline const char* to_string(IpcMechanism m) {
  return m == IpcMechanism::InProcessChannel ? "in_process" : "domain_socket";
}

struct IpcResult {
  double messages_per_sec = 0;
  std::uint64_t round_trips = 0;
  bool pinned = false;
  std::string note;
};

// Two pinned echo endpoints exchanging minimal messages for `duration`.
// Placement picks core 0 plus either its socket neighbor or the first core of
// the next socket; hosts without that second core fall back unpinned.
inline IpcResult measure_ipc(IpcMechanism mech, bool same_socket,
                             std::chrono::nanoseconds duration) {
  IpcResult res;
  if (duration.count() <= 0) return res;

  Topology topo = Topology::detect_real();
  std::uint32_t core_a = 0;
  std::uint32_t core_b;
  if (same_socket) {
    core_b = topo.cores_per_socket() >= 2 ? 1u : 0u;
  } else {
    core_b = topo.sockets() >= 2 ? topo.cores_per_socket() : 0u;
  }
  bool can_pin = core_b != core_a;
  if (!can_pin)
    res.note = same_socket ? "single-core socket, unpinned" : "single socket, unpinned";

  std::unique_ptr<Transport> tr;
  if (mech == IpcMechanism::InProcessChannel)
    tr = std::make_unique<InProcessTransport>(2, InProcessTransport::zero_latency(2));
  else
    tr = std::make_unique<DomainSocketTransport>(2);

  std::atomic<bool> stop{false};
  std::atomic<bool> echo_pinned{false};
  std::thread echo([&] {
    if (can_pin) echo_pinned.store(pin_current_thread(core_b, topo.total_cores()).applied);
    Message m;
    while (tr->recv(1, m, now_ns() + 50'000'000)) {
      if (stop.load(std::memory_order_relaxed)) break;
      Message reply;
      reply.kind = MsgKind::Ack;
      reply.gtid = m.gtid;
      reply.origin = 1;
      reply.destination = 0;
      if (!tr->send(std::move(reply))) break;
    }
  });

  bool self_pinned = can_pin && pin_current_thread(core_a, topo.total_cores()).applied;
  std::int64_t t0 = now_ns();
  std::int64_t t_end = t0 + duration.count();
  std::uint64_t rt = 0;
  Message ping;
  ping.kind = MsgKind::Ack;
  ping.origin = 0;
  ping.destination = 1;
  while (now_ns() < t_end) {
    ping.gtid = rt + 1;
    if (!tr->send(ping)) break;
    Message got;
    if (!tr->recv(0, got, now_ns() + 1'000'000'000)) break;
    ++rt;
  }
  std::int64_t t1 = now_ns();
  stop.store(true, std::memory_order_relaxed);
  tr->close();
  echo.join();

  res.round_trips = rt;
  double secs = static_cast<double>(t1 - t0) / 1e9;
  res.messages_per_sec = secs > 0 ? static_cast<double>(rt) * 2.0 / secs : 0.0;
  res.pinned = self_pinned && echo_pinned.load();
  return res;
}

}  // namespace isl
