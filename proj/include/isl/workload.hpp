#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "isl/common.hpp"
#include "isl/partition.hpp"
#include "isl/txn.hpp"

namespace isl {

enum class WorkloadKind : std::uint8_t { MicroRead, MicroUpdate, PaymentLike };

inline const char* to_string(WorkloadKind k) {
  switch (k) {
    case WorkloadKind::MicroRead: return "micro_read";
    case WorkloadKind::MicroUpdate: return "micro_update";
    case WorkloadKind::PaymentLike: return "payment_like";
  }
  return "?";
}

struct WorkloadSpec {
  WorkloadKind kind = WorkloadKind::MicroRead;
  std::uint32_t rows_per_txn = 10;  // ignored by PaymentLike
  double pct_multisite = 0.0;       // [0, 100]
  double zipf_s = 0.0;              // 0 = uniform
  std::uint64_t total_rows = 0;     // 0 = inherit the partition map's row count
  std::uint64_t rng_seed = 1;
};

// Inverse-CDF sampler over ranks 1..n with P(rank r) proportional to 1/r^s.
// The cumulative weights and their total are accumulated with identical
// compensated sums, so cdf.back() is exactly 1.0.
class ZipfTable {
 public:
  ZipfTable(std::uint64_t n, double s, std::uint64_t shuffle_seed = 0)
      : n_(n), s_(s) {
    if (n == 0) throw std::invalid_argument("zipf: empty domain");
    if (s < 0) throw std::invalid_argument("zipf: negative skew");
    std::vector<double> cum(n);
    double sum = 0.0, comp = 0.0;
    for (std::uint64_t r = 1; r <= n; ++r) {
      double w = s == 0.0 ? 1.0 : std::pow(static_cast<double>(r), -s);
      double y = w - comp;
      double t = sum + y;
      comp = (t - sum) - y;
      sum = t;
      cum[r - 1] = sum;
    }
    cdf_.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) cdf_[i] = cum[i] / sum;
    perm_.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) perm_[i] = i;
    if (shuffle_seed != 0) {
      std::mt19937_64 g(shuffle_seed);
      std::shuffle(perm_.begin(), perm_.end(), g);
    }
  }

  std::uint64_t n() const { return n_; }
  double s() const { return s_; }
  const std::vector<double>& cdf() const { return cdf_; }

  // Rank of the hottest key is 1; the identity permutation maps it to key 0.
  Key key_of_rank(std::uint64_t rank) const { return perm_.at(rank - 1); }

  Key sample(double u) const {
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    std::size_t idx = it == cdf_.end() ? n_ - 1
                                       : static_cast<std::size_t>(it - cdf_.begin());
    return perm_[idx];
  }

 private:
  std::uint64_t n_;
  double s_;
  std::vector<double> cdf_;
  std::vector<Key> perm_;
};

inline Key zipf_sample(const ZipfTable& zt, double u) { return zt.sample(u); }

// Per-worker transaction source. Owns its RNG (seed xor global worker id) so
// streams are deterministic and never shared across threads.
class TxnGenerator {
 public:
  TxnGenerator(const WorkloadSpec& spec, const PartitionMap& pm, InstanceId origin,
               std::uint32_t worker_global_id)
      : spec_(spec),
        origin_(origin),
        range_(pm.range_of(origin)),
        n_instances_(pm.n_instances()),
        total_rows_(spec.total_rows == 0 ? pm.total_rows() : spec.total_rows),
        rng_(spec.rng_seed ^ worker_global_id) {
    if (spec_.pct_multisite < 0 || spec_.pct_multisite > 100)
      throw std::invalid_argument("workload: pct_multisite outside [0,100]");
    if (spec_.zipf_s < 0) throw std::invalid_argument("workload: negative zipf_s");
    if (total_rows_ > pm.total_rows())
      throw std::invalid_argument("workload: total_rows exceeds partition map");
    std::uint64_t span = range_.hi - range_.lo;
    if (spec_.kind == WorkloadKind::PaymentLike) {
      if (span < 2)
        throw std::invalid_argument("workload: payment needs 2 rows per instance");
    } else {
      if (spec_.rows_per_txn == 0)
        throw std::invalid_argument("workload: zero rows_per_txn");
      if (span < spec_.rows_per_txn)
        throw std::invalid_argument("workload: origin range smaller than rows_per_txn");
    }
    if (spec_.zipf_s > 0 && spec_.kind != WorkloadKind::PaymentLike)
      zipf_ = std::make_unique<ZipfTable>(total_rows_, spec_.zipf_s);
  }

  InstanceId origin() const { return origin_; }

  TxnRequest next() {
    TxnRequest req;
    req.origin = origin_;
    req.op = spec_.kind == WorkloadKind::MicroRead ? TxnOp::ReadRows
                                                   : TxnOp::UpdateRows;
    if (spec_.kind == WorkloadKind::PaymentLike) {
      req.keys.push_back(range_.lo);  // designated hot row of this instance
      req.keys.push_back(range_.lo + 1 + draw_below(range_.hi - range_.lo - 1));
      return req;
    }
    std::uint32_t n = spec_.rows_per_txn;
    bool multisite =
        spec_.pct_multisite > 0 && draw_unit() * 100.0 < spec_.pct_multisite;
    // A single-instance deployment has one site, so nothing it generates is
    // multisite; the draw still follows the multisite key distribution so a
    // skewed workload keeps its hot keys.
    req.multisite_intent = multisite && n_instances_ > 1;
    req.keys.reserve(n);
    if (!multisite) {
      for (std::uint32_t i = 0; i < n; ++i)
        push_distinct(req.keys, range_.lo, range_.hi,
                      [&] { return range_.lo + draw_below(range_.hi - range_.lo); });
    } else if (zipf_) {
      // Skewed runs draw every key over the whole range; skew is the point,
      // forcing one key local would dilute it.
      for (std::uint32_t i = 0; i < n; ++i)
        push_distinct(req.keys, 0, total_rows_, [&] { return zipf_->sample(draw_unit()); });
    } else {
      push_distinct(req.keys, range_.lo, range_.hi,
                    [&] { return range_.lo + draw_below(range_.hi - range_.lo); });
      for (std::uint32_t i = 1; i < n; ++i)
        push_distinct(req.keys, 0, total_rows_, [&] { return draw_below(total_rows_); });
    }
    return req;
  }

 private:
  std::uint64_t draw_below(std::uint64_t n) { return bounded(rng_(), n); }

  double draw_unit() {
    return static_cast<double>(rng_() >> 11) * 0x1.0p-53;
  }

  // Redraws preserve the distribution; the probe bounds the worst case and
  // stays inside the draw's own domain.
  template <typename Draw>
  void push_distinct(std::vector<Key>& keys, Key lo, Key hi, Draw draw) {
    Key k = draw();
    for (int tries = 0;
         std::find(keys.begin(), keys.end(), k) != keys.end() && tries < 16; ++tries)
      k = draw();
    while (std::find(keys.begin(), keys.end(), k) != keys.end()) {
      ++k;
      if (k >= hi) k = lo;
    }
    keys.push_back(k);
  }

  WorkloadSpec spec_;
  InstanceId origin_;
  KeyRange range_;
  std::uint32_t n_instances_;
  std::uint64_t total_rows_;
  std::mt19937_64 rng_;
  std::unique_ptr<ZipfTable> zipf_;
};

inline TxnRequest next_txn(TxnGenerator& gen) { return gen.next(); }

// Generator factory for Cluster::install_generators.
inline std::function<InstanceRuntime::Generator(InstanceId, std::uint32_t)>
workload_factory(const WorkloadSpec& spec, const PartitionMap& pm,
                 std::uint32_t workers_per_instance) {
  return [spec, &pm, workers_per_instance](InstanceId i, std::uint32_t w) {
    auto gen = std::make_shared<TxnGenerator>(spec, pm, i,
                                              i * workers_per_instance + w);
    return [gen]() -> std::optional<TxnRequest> { return gen->next(); };
  };
}

}  // namespace isl
