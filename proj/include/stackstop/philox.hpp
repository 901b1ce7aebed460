#pragma once

// Philox4x32-10 counter-based generator. Every draw is a pure function of
// (key, counter), so streams can be addressed directly by path and time.

#include <array>
#include <cstdint>

namespace stackstop {

using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

inline PhiloxCounter philox4x32_10(PhiloxCounter ctr, PhiloxKey key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = std::uint64_t{kM0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kM1} * ctr[2];
    ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
           static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

/// Uniform on (0, 1] with 53 random bits, so u <= 0 never happens and
/// u <= 1 always does.
inline double philox_uniform(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = (std::uint64_t{hi} << 21) ^ (lo >> 11);
  return static_cast<double>((bits & ((std::uint64_t{1} << 53) - 1)) + 1) * 0x1.0p-53;
}

/// Draw addressed by (seed, stream, time, device).
inline double philox_draw(std::uint64_t seed, std::uint64_t stream, std::uint32_t time,
                          std::uint32_t device) {
  PhiloxCounter c{static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                  time, device};
  PhiloxKey k{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  PhiloxCounter r = philox4x32_10(c, k);
  return philox_uniform(r[0], r[1]);
}

}  // namespace stackstop
