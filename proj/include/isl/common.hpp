#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>

namespace isl {

using Key = std::uint64_t;
using TxnId = std::uint64_t;
using Gtid = std::uint64_t;
using InstanceId = std::uint32_t;
using CoreId = std::uint32_t;
using WorkerId = std::uint32_t;

inline constexpr std::size_t payload_bytes = 100;
using Payload = std::array<std::uint8_t, payload_bytes>;

using Clock = std::chrono::steady_clock;

inline std::int64_t now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             Clock::now().time_since_epoch())
      .count();
}

// Thrown when a placement or deployment asks for more cores than exist.
class capacity_error : public std::runtime_error {
 public:
  explicit capacity_error(const std::string& what) : std::runtime_error(what) {}
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Row contents are a pure function of the key so that freshly loaded
// partitions compare bitwise-equal across deployments.
inline Payload payload_for_key(Key key) {
  Payload p;
  std::uint64_t s = splitmix64(key ^ 0x5eedf00dull);
  for (std::size_t i = 0; i < payload_bytes; i += 8) {
    s = splitmix64(s);
    std::size_t n = std::min<std::size_t>(8, payload_bytes - i);
    std::memcpy(p.data() + i, &s, n);
  }
  return p;
}

// Value written by an update transaction: a function of (key, txn tag) only,
// so a serial replay of committed transactions reproduces the exact bytes.
inline Payload payload_for_update(Key key, std::uint64_t tag) {
  Payload p = payload_for_key(key ^ splitmix64(tag));
  std::memcpy(p.data(), &tag, sizeof(tag));
  return p;
}

// xorshift-free bounded draw, uniform over [0, n) via 128-bit multiply.
inline std::uint64_t bounded(std::uint64_t r, std::uint64_t n) {
  return static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(r) * n) >> 64);
}

}  // namespace isl
