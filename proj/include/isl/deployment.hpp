#pragma once

#include <cstdint>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "isl/common.hpp"
#include "isl/partition.hpp"
#include "isl/storage.hpp"
#include "isl/topology.hpp"
#include "isl/trace.hpp"
#include "isl/transport.hpp"
#include "isl/txn.hpp"

namespace isl {

enum class TransportKind : std::uint8_t { InProcess, DomainSocket };

struct ClusterConfig {
  Topology topology{1, 1, TopologyMode::Simulated};
  PlacementPolicy placement = PlacementPolicy::Group;
  std::uint32_t n_instances = 1;
  std::uint32_t workers_per_instance = 1;
  std::uint64_t total_rows = 1024;
  TransportKind transport = TransportKind::InProcess;
  std::size_t queue_capacity = 1024;
  RuntimeTuning tuning;
  AuditTrace::Options audit;
  bool wal_retain_all = false;
  std::size_t wal_ring_capacity = std::size_t{1} << 15;
};

// A running MISL configuration: N instances over one partition map, connected
// all-to-all, with workers placed per policy. Build, start, drive, stop.
class Cluster {
 public:
  explicit Cluster(ClusterConfig cfg)
      : cfg_(std::move(cfg)),
        trace_(cfg_.audit),
        pmap_(cfg_.total_rows, cfg_.n_instances) {
    std::uint64_t demand =
        std::uint64_t{cfg_.n_instances} * cfg_.workers_per_instance;
    if (cfg_.n_instances == 0 || cfg_.workers_per_instance == 0)
      throw std::invalid_argument("cluster: zero instances or workers");

    std::vector<std::uint32_t> groups(cfg_.n_instances, cfg_.workers_per_instance);
    // Latency injection needs a logical core per worker even when the policy
    // leaves threads unpinned, so Unpinned borrows the Spread layout.
    PlacementPolicy latency_policy =
        cfg_.placement == PlacementPolicy::Unpinned ? PlacementPolicy::Spread
                                                    : cfg_.placement;
    if (demand <= cfg_.topology.total_cores()) {
      placement_ = place_workers(cfg_.topology, latency_policy, groups);
    } else if (cfg_.topology.mode() == TopologyMode::Real) {
      // Undersized host: run unpinned instead of failing, like a pin error.
      placement_.pinned = false;
      for (std::uint32_t gid = 0; gid < demand; ++gid)
        placement_.assignments[gid] =
            static_cast<CoreId>(gid % cfg_.topology.total_cores());
      warnings_.push_back("placement: " + std::to_string(demand) + " workers > " +
                          std::to_string(cfg_.topology.total_cores()) +
                          " cores, running unpinned");
    } else {
      throw capacity_error("cluster: workers exceed simulated cores");
    }
    if (cfg_.placement == PlacementPolicy::Unpinned) placement_.pinned = false;
    pin_threads_ = cfg_.topology.mode() == TopologyMode::Real && placement_.pinned;

    std::vector<std::vector<std::int64_t>> lat(
        cfg_.n_instances, std::vector<std::int64_t>(cfg_.n_instances, 0));
    if (cfg_.topology.mode() == TopologyMode::Simulated) {
      for (std::uint32_t i = 0; i < cfg_.n_instances; ++i) {
        for (std::uint32_t j = 0; j < cfg_.n_instances; ++j) {
          if (i == j) continue;
          CoreId a = home_core(i);
          CoreId b = home_core(j);
          lat[i][j] = cfg_.topology.sim_latency().of(cfg_.topology.comm_class(a, b));
        }
      }
    }

    if (cfg_.transport == TransportKind::InProcess)
      transport_ = std::make_unique<InProcessTransport>(cfg_.n_instances, std::move(lat),
                                                        cfg_.queue_capacity, &trace_);
    else
      transport_ = std::make_unique<DomainSocketTransport>(cfg_.n_instances,
                                                           cfg_.queue_capacity, &trace_);

    instances_.reserve(cfg_.n_instances);
    for (std::uint32_t i = 0; i < cfg_.n_instances; ++i) {
      StorageEngine::Options eo;
      eo.instance = i;
      eo.range = pmap_.range_of(i);
      eo.locking_enabled = cfg_.workers_per_instance > 1;
      eo.wal.retain_all = cfg_.wal_retain_all;
      eo.wal.ring_capacity = cfg_.wal_ring_capacity;
      instances_.push_back(std::make_unique<InstanceRuntime>(
          i, eo, cfg_.workers_per_instance, transport_.get(), &pmap_, &trace_,
          cfg_.tuning));
    }
  }

  ~Cluster() {
    if (started_ && !stopped_) stop();
  }

  const ClusterConfig& config() const { return cfg_; }
  const PartitionMap& pmap() const { return pmap_; }
  const Placement& placement() const { return placement_; }
  AuditTrace& trace() { return trace_; }
  Transport& transport() { return *transport_; }
  std::uint32_t n_instances() const { return cfg_.n_instances; }
  InstanceRuntime& instance(InstanceId i) { return *instances_.at(i); }
  std::vector<std::string> warnings() {
    std::lock_guard<std::mutex> g(warn_mu_);
    return warnings_;
  }

  CoreId home_core(InstanceId i) const {
    auto it = placement_.assignments.find(i * cfg_.workers_per_instance);
    return it == placement_.assignments.end() ? 0 : it->second;
  }

  // factory(instance, worker) -> per-worker request source; install before start.
  void install_generators(
      const std::function<InstanceRuntime::Generator(InstanceId, std::uint32_t)>& factory) {
    for (std::uint32_t i = 0; i < cfg_.n_instances; ++i)
      for (std::uint32_t w = 0; w < cfg_.workers_per_instance; ++w)
        instances_[i]->set_generator(w, factory(i, w));
  }

  void start() {
    started_ = true;
    for (auto& inst : instances_) inst->start_dispatcher();
    for (std::uint32_t i = 0; i < cfg_.n_instances; ++i) {
      for (std::uint32_t w = 0; w < cfg_.workers_per_instance; ++w) {
        std::uint32_t gid = i * cfg_.workers_per_instance + w;
        workers_.emplace_back([this, i, w, gid] {
          if (pin_threads_) {
            auto it = placement_.assignments.find(gid);
            if (it != placement_.assignments.end()) {
              PlatformResult r =
                  pin_current_thread(it->second, cfg_.topology.total_cores());
              if (!r.warning.empty()) {
                std::lock_guard<std::mutex> g(warn_mu_);
                warnings_.push_back(r.warning);
              }
            }
          }
          instances_[i]->run_worker(w);
        });
      }
    }
  }

  std::future<TxnResult> submit(TxnRequest req) {
    req.done = std::make_shared<std::promise<TxnResult>>();
    if (req.tag == 0) req.tag = trace_.next_tag();
    std::future<TxnResult> f = req.done->get_future();
    if (req.origin >= cfg_.n_instances)
      throw std::invalid_argument("cluster: bad origin");
    auto done = req.done;
    if (!instances_[req.origin]->submit(std::move(req)))
      done->set_value(TxnResult{});
    return f;
  }

  // Stop intake and wait until every instance has no queued or in-flight
  // transaction work. Returns false on timeout.
  bool quiesce(std::int64_t timeout_ns = 30'000'000'000) {
    for (auto& inst : instances_) inst->stop_accepting();
    std::int64_t deadline = now_ns() + timeout_ns;
    int stable = 0;
    while (now_ns() < deadline) {
      bool all = true;
      for (auto& inst : instances_)
        if (!inst->quiescent()) {
          all = false;
          break;
        }
      if (all && transport_->pending_count() == 0) {
        if (++stable >= 3) return true;
      } else {
        stable = 0;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
    return false;
  }

  void stop() {
    if (stopped_) return;
    stopped_ = true;
    quiesce();
    for (auto& inst : instances_) inst->shutdown();
    transport_->close();
    for (auto& inst : instances_) inst->join_dispatcher();
    for (auto& t : workers_)
      if (t.joinable()) t.join();
  }

  std::vector<WorkerStats*> worker_stats() {
    std::vector<WorkerStats*> out;
    for (auto& inst : instances_)
      for (std::uint32_t w = 0; w < inst->n_workers(); ++w)
        out.push_back(&inst->stats_of(w));
    return out;
  }

 private:
  ClusterConfig cfg_;
  AuditTrace trace_;
  PartitionMap pmap_;
  Placement placement_;
  bool pin_threads_ = false;
  std::unique_ptr<Transport> transport_;
  std::vector<std::unique_ptr<InstanceRuntime>> instances_;
  std::vector<std::thread> workers_;
  std::mutex warn_mu_;
  std::vector<std::string> warnings_;
  bool started_ = false;
  bool stopped_ = false;
};

}  // namespace isl
