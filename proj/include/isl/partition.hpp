#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "isl/common.hpp"
#include "isl/storage.hpp"

namespace isl {

// Contiguous range partitioning: ranges are disjoint, sorted, cover exactly
// [0, total_rows), and the first (total_rows mod n) instances get one extra
// key.
class PartitionMap {
 public:
  PartitionMap() = default;

  PartitionMap(std::uint64_t total_rows, std::uint32_t n_instances)
      : total_rows_(total_rows), n_(n_instances) {
    if (n_instances == 0) throw std::invalid_argument("partition: zero instances");
    if (total_rows < n_instances)
      throw std::invalid_argument("partition: fewer rows than instances");
    base_ = total_rows / n_instances;
    extra_ = total_rows % n_instances;
    ranges_.reserve(n_instances);
    Key lo = 0;
    for (std::uint32_t i = 0; i < n_instances; ++i) {
      Key hi = lo + base_ + (i < extra_ ? 1 : 0);
      ranges_.push_back(KeyRange{lo, hi});
      lo = hi;
    }
  }

  std::uint64_t total_rows() const { return total_rows_; }
  std::uint32_t n_instances() const { return n_; }
  const KeyRange& range_of(InstanceId i) const { return ranges_.at(i); }
  const std::vector<KeyRange>& ranges() const { return ranges_; }

  InstanceId owner_of(Key k) const {
    if (k >= total_rows_) throw std::invalid_argument("partition: key out of range");
    Key boundary = extra_ * (base_ + 1);
    if (k < boundary) return static_cast<InstanceId>(k / (base_ + 1));
    return static_cast<InstanceId>(extra_ + (k - boundary) / base_);
  }

 private:
  std::uint64_t total_rows_ = 0;
  std::uint32_t n_ = 0;
  std::uint64_t base_ = 0;
  std::uint64_t extra_ = 0;
  std::vector<KeyRange> ranges_;
};

inline PartitionMap make_partition_map(std::uint64_t total_rows, std::uint32_t n_instances) {
  return PartitionMap(total_rows, n_instances);
}

inline InstanceId partition_of(const PartitionMap& pm, Key k) { return pm.owner_of(k); }

}  // namespace isl
