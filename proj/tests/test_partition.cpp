#include <catch2/catch_amalgamated.hpp>

#include "isl/partition.hpp"

using namespace isl;

TEST_CASE("even split: 240000 rows over 24 instances") {
  PartitionMap pm(240000, 24);
  for (InstanceId i = 0; i < 24; ++i) {
    KeyRange r = pm.range_of(i);
    CHECK(r.lo == 10000ull * i);
    CHECK(r.hi == 10000ull * (i + 1));
  }
  CHECK(pm.owner_of(0) == 0);
  CHECK(pm.owner_of(9999) == 0);
  CHECK(pm.owner_of(10000) == 1);
  CHECK(pm.owner_of(239999) == 23);
}

TEST_CASE("uneven split: 10 rows over 3 instances") {
  PartitionMap pm(10, 3);
  CHECK(pm.range_of(0).lo == 0);
  CHECK(pm.range_of(0).hi == 4);
  CHECK(pm.range_of(1).lo == 4);
  CHECK(pm.range_of(1).hi == 7);
  CHECK(pm.range_of(2).lo == 7);
  CHECK(pm.range_of(2).hi == 10);
  for (Key k = 0; k < 4; ++k) CHECK(pm.owner_of(k) == 0);
  for (Key k = 4; k < 7; ++k) CHECK(pm.owner_of(k) == 1);
  for (Key k = 7; k < 10; ++k) CHECK(pm.owner_of(k) == 2);
}

TEST_CASE("single instance owns everything") {
  PartitionMap pm(7, 1);
  CHECK(pm.range_of(0).lo == 0);
  CHECK(pm.range_of(0).hi == 7);
  for (Key k = 0; k < 7; ++k) CHECK(pm.owner_of(k) == 0);
}

TEST_CASE("degenerate maps rejected") {
  CHECK_THROWS_AS(PartitionMap(10, 0), std::invalid_argument);
  CHECK_THROWS_AS(PartitionMap(3, 4), std::invalid_argument);
  CHECK_THROWS_AS(PartitionMap(0, 1), std::invalid_argument);
  PartitionMap pm(10, 3);
  CHECK_THROWS_AS(pm.owner_of(10), std::invalid_argument);
}

// Every key has exactly one owner, owner arithmetic agrees with a linear
// scan of the ranges, sizes differ by at most one, and the first
// (rows mod instances) ranges carry the extra key.
TEST_CASE("partition totality, exhaustive over small maps") {
  for (std::uint32_t n = 1; n <= 32; ++n) {
    for (std::uint64_t rows = n; rows <= 1000; rows += (rows < 64 ? 1 : 7)) {
      PartitionMap pm(rows, n);
      std::uint64_t base = rows / n;
      std::uint64_t extra = rows % n;

      std::uint64_t covered = 0;
      Key expect_lo = 0;
      for (InstanceId i = 0; i < n; ++i) {
        KeyRange r = pm.range_of(i);
        REQUIRE(r.lo == expect_lo);
        std::uint64_t want = base + (i < extra ? 1 : 0);
        REQUIRE(r.size() == want);
        expect_lo = r.hi;
        covered += r.size();
      }
      REQUIRE(covered == rows);

      std::uint64_t bad = 0;
      for (Key k = 0; k < rows; ++k) {
        std::uint32_t holders = 0;
        InstanceId scan_owner = 0;
        for (InstanceId i = 0; i < n; ++i) {
          if (pm.range_of(i).contains(k)) {
            ++holders;
            scan_owner = i;
          }
        }
        if (holders != 1 || scan_owner != pm.owner_of(k)) ++bad;
      }
      REQUIRE(bad == 0);
    }
  }
}

TEST_CASE("free function matches the map") {
  auto pm = make_partition_map(100, 8);
  for (Key k = 0; k < 100; ++k) CHECK(partition_of(pm, k) == pm.owner_of(k));
}
