#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "isl/common.hpp"

#if defined(__linux__)
#include <pthread.h>
#include <sched.h>
#include <unistd.h>
#endif

namespace isl {

enum class CommClass : std::uint8_t { SameCore = 0, SameSocket = 1, CrossSocket = 2 };

inline const char* to_string(CommClass c) {
  switch (c) {
    case CommClass::SameCore: return "same_core";
    case CommClass::SameSocket: return "same_socket";
    case CommClass::CrossSocket: return "cross_socket";
  }
  return "?";
}

enum class PlacementPolicy : std::uint8_t { Spread, Group, Mix, Unpinned };

inline const char* to_string(PlacementPolicy p) {
  switch (p) {
    case PlacementPolicy::Spread: return "spread";
    case PlacementPolicy::Group: return "group";
    case PlacementPolicy::Mix: return "mix";
    case PlacementPolicy::Unpinned: return "unpinned";
  }
  return "?";
}

enum class TopologyMode : std::uint8_t { Real, Simulated };

struct SimLatency {
  std::int64_t same_core_ns = 0;
  std::int64_t same_socket_ns = 100;
  std::int64_t cross_socket_ns = 500;

  std::int64_t of(CommClass c) const {
    switch (c) {
      case CommClass::SameCore: return same_core_ns;
      case CommClass::SameSocket: return same_socket_ns;
      case CommClass::CrossSocket: return cross_socket_ns;
    }
    return 0;
  }
};

// Sockets of cores with contiguous numbering: cores [i*cps, (i+1)*cps)
// belong to socket i.
class Topology {
 public:
  Topology(std::uint32_t sockets, std::uint32_t cores_per_socket,
           TopologyMode mode = TopologyMode::Simulated,
           SimLatency lat = SimLatency{})
      : sockets_(sockets), cores_per_socket_(cores_per_socket), mode_(mode), lat_(lat) {
    if (sockets_ < 1 || cores_per_socket_ < 1)
      throw std::invalid_argument("topology: sockets and cores_per_socket must be >= 1");
    if (mode_ == TopologyMode::Simulated) {
      if (lat_.same_core_ns > lat_.same_socket_ns || lat_.same_socket_ns > lat_.cross_socket_ns)
        throw std::invalid_argument("topology: sim latencies must be monotone "
                                    "same_core <= same_socket <= cross_socket");
    }
  }

  // Queries the running machine. Falls back to a single-socket layout when
  // sysfs is unavailable.
  static Topology detect_real();

  std::uint32_t sockets() const { return sockets_; }
  std::uint32_t cores_per_socket() const { return cores_per_socket_; }
  std::uint32_t total_cores() const { return sockets_ * cores_per_socket_; }
  TopologyMode mode() const { return mode_; }
  const SimLatency& sim_latency() const { return lat_; }

  std::uint32_t socket_of(CoreId c) const { return c / cores_per_socket_; }

  CommClass comm_class(CoreId a, CoreId b) const {
    if (a >= total_cores() || b >= total_cores())
      throw std::invalid_argument("comm_class: core id out of range");
    if (a == b) return CommClass::SameCore;
    return socket_of(a) == socket_of(b) ? CommClass::SameSocket : CommClass::CrossSocket;
  }

  std::int64_t latency_ns(CoreId a, CoreId b) const {
    return lat_.of(comm_class(a, b));
  }

 private:
  std::uint32_t sockets_;
  std::uint32_t cores_per_socket_;
  TopologyMode mode_;
  SimLatency lat_;
};

// Worker-to-core assignment. Empty for Unpinned.
struct Placement {
  std::map<WorkerId, CoreId> assignments;
  bool pinned = true;

  CoreId core_of(WorkerId w) const {
    auto it = assignments.find(w);
    if (it == assignments.end())
      throw std::invalid_argument("placement: unknown worker " + std::to_string(w));
    return it->second;
  }
};

namespace detail {

// Per-socket free-core bookkeeping used by the placement policies.
struct FreeCores {
  std::vector<std::vector<CoreId>> per_socket;  // ascending core ids

  explicit FreeCores(const Topology& t) : per_socket(t.sockets()) {
    for (std::uint32_t s = 0; s < t.sockets(); ++s)
      for (std::uint32_t c = 0; c < t.cores_per_socket(); ++c)
        per_socket[s].push_back(s * t.cores_per_socket() + c);
  }

  std::size_t free_in(std::uint32_t socket) const { return per_socket[socket].size(); }

  CoreId take(std::uint32_t socket) {
    CoreId c = per_socket[socket].front();
    per_socket[socket].erase(per_socket[socket].begin());
    return c;
  }
};

}  // namespace detail

// Assigns each group's workers to cores under the given policy. Worker ids
// are global and group-major: group g's j-th worker is id (offset_g + j).
// Deterministic for fixed inputs.
//
//   Group  — each group lands on the fewest sockets that can hold it
//            (best-fit single socket when it fits, else a greedy fill
//            from the lowest-indexed sockets with space).
//   Spread — workers of a group round-robin across sockets starting at 0.
//   Mix    — each group split evenly across all sockets, remainder to the
//            lowest sockets first.
//   Unpinned — no assignments.
inline Placement place_workers(const Topology& t, PlacementPolicy policy,
                               const std::vector<std::uint32_t>& groups) {
  std::uint64_t demand = std::accumulate(groups.begin(), groups.end(), std::uint64_t{0});
  if (demand > t.total_cores())
    throw capacity_error("place_workers: " + std::to_string(demand) + " workers > " +
                         std::to_string(t.total_cores()) + " cores");

  Placement out;
  if (policy == PlacementPolicy::Unpinned) {
    out.pinned = false;
    return out;
  }

  detail::FreeCores free(t);
  WorkerId next_id = 0;

  for (std::uint32_t gsize : groups) {
    std::uint32_t remaining = gsize;
    switch (policy) {
      case PlacementPolicy::Group: {
        while (remaining > 0) {
          // Best-fit: the socket with the least free capacity that still
          // holds the whole remainder; otherwise drain the fullest socket.
          std::int32_t pick = -1;
          for (std::uint32_t s = 0; s < t.sockets(); ++s) {
            if (free.free_in(s) >= remaining &&
                (pick < 0 || free.free_in(s) < free.free_in(pick)))
              pick = static_cast<std::int32_t>(s);
          }
          if (pick < 0) {
            for (std::uint32_t s = 0; s < t.sockets(); ++s) {
              if (free.free_in(s) > 0 &&
                  (pick < 0 || free.free_in(s) > free.free_in(pick)))
                pick = static_cast<std::int32_t>(s);
            }
          }
          std::uint32_t take = std::min<std::uint32_t>(
              remaining, static_cast<std::uint32_t>(free.free_in(pick)));
          for (std::uint32_t i = 0; i < take; ++i)
            out.assignments[next_id++] = free.take(pick);
          remaining -= take;
        }
        break;
      }
      case PlacementPolicy::Spread: {
        std::uint32_t s = 0;
        while (remaining > 0) {
          while (free.free_in(s % t.sockets()) == 0) ++s;  // capacity pre-checked
          out.assignments[next_id++] = free.take(s % t.sockets());
          ++s;
          --remaining;
        }
        break;
      }
      case PlacementPolicy::Mix: {
        std::uint32_t base = gsize / t.sockets();
        std::uint32_t rem = gsize % t.sockets();
        for (std::uint32_t s = 0; s < t.sockets() && remaining > 0; ++s) {
          std::uint32_t want = base + (s < rem ? 1 : 0);
          for (std::uint32_t i = 0; i < want && remaining > 0; ++i) {
            std::uint32_t probe = s;
            while (free.free_in(probe) == 0) probe = (probe + 1) % t.sockets();
            out.assignments[next_id++] = free.take(probe);
            --remaining;
          }
        }
        break;
      }
      case PlacementPolicy::Unpinned:
        break;
    }
  }
  return out;
}

struct PlatformResult {
  bool applied = false;
  std::string warning;
};

// Binds the calling thread to `core`. Real mode only; callers in Simulated
// mode record the placement and skip this.
inline PlatformResult pin_current_thread(CoreId core, std::uint32_t detected_cores) {
  PlatformResult r;
  if (core >= detected_cores)
    throw std::invalid_argument("pin_current_thread: core " + std::to_string(core) +
                                " >= detected " + std::to_string(detected_cores));
#if defined(__linux__)
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(core, &set);
  int rc = pthread_setaffinity_np(pthread_self(), sizeof(set), &set);
  if (rc != 0) {
    r.warning = "affinity not applied (errno " + std::to_string(rc) + "), running unpinned";
    return r;
  }
  r.applied = true;
#else
  r.warning = "thread affinity unsupported on this platform, running unpinned";
#endif
  return r;
}

// Validates a placement against a live topology and, in Real mode, pins
// nothing by itself: threads call pin_current_thread as they start. In
// Simulated mode the placement is simply recorded by the caller.
inline PlatformResult apply_placement(const Topology& t, const Placement& p) {
  PlatformResult r;
  if (!p.pinned) {
    r.applied = false;
    return r;
  }
  for (const auto& [w, c] : p.assignments) {
    if (c >= t.total_cores())
      throw std::invalid_argument("apply_placement: core " + std::to_string(c) +
                                  " out of range");
  }
  r.applied = true;
  return r;
}

inline Topology Topology::detect_real() {
#if defined(__linux__)
  long n = sysconf(_SC_NPROCESSORS_ONLN);
  std::uint32_t cpus = n > 0 ? static_cast<std::uint32_t>(n) : 1;
  // Map cpu -> package id via sysfs; fall back to one socket.
  std::map<int, int> pkg_count;
  bool ok = true;
  for (std::uint32_t c = 0; c < cpus; ++c) {
    std::string path = "/sys/devices/system/cpu/cpu" + std::to_string(c) +
                       "/topology/physical_package_id";
    FILE* f = std::fopen(path.c_str(), "r");
    if (!f) { ok = false; break; }
    int pkg = 0;
    if (std::fscanf(f, "%d", &pkg) != 1) { std::fclose(f); ok = false; break; }
    std::fclose(f);
    pkg_count[pkg]++;
  }
  if (ok && !pkg_count.empty()) {
    std::uint32_t sockets = static_cast<std::uint32_t>(pkg_count.size());
    std::uint32_t cps = cpus / sockets;
    if (cps >= 1 && sockets * cps <= cpus)
      return Topology(sockets, cps, TopologyMode::Real);
  }
  return Topology(1, cpus, TopologyMode::Real);
#else
  return Topology(1, 1, TopologyMode::Real);
#endif
}

}  // namespace isl
