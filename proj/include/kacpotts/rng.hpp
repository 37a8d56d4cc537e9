#pragma once

// Philox4x32-10 counter-based generator. A (seed, stream) pair names an
// independent sequence; the position inside it is a plain counter, so a state
// is fully described by three integers.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace kacpotts {

using Philox4 = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

inline Philox4 philox4x32_10(Philox4 ctr, PhiloxKey key) {
  constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
  constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(M0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(M1) * ctr[2];
    ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
           static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
    key[0] += W0;
    key[1] += W1;
  }
  return ctr;
}

class CounterRng {
public:
  using result_type = std::uint32_t;

  CounterRng(std::uint64_t seed = 0, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    if (lane_ == 4) {
      const Philox4 ctr{static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
                        static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
      block_ = philox4x32_10(ctr, {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
      ++counter_;
      lane_ = 0;
    }
    return block_[lane_++];
  }

  /// Uniform in [0,1) with 53 random bits.
  double uniform() {
    const std::uint64_t hi = (*this)() >> 5, lo = (*this)() >> 6;
    return (static_cast<double>(hi) * 67108864.0 + static_cast<double>(lo)) * (1.0 / 9007199254740992.0);
  }

  /// Uniform in (0,1], safe under log.
  double uniform_open() { return 1.0 - uniform(); }

  /// Uniform integer in [0, n) by rejection, n > 0.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    for (;;) {
      const std::uint64_t x = (static_cast<std::uint64_t>((*this)()) << 32) | (*this)();
      if (x < limit) return x % n;
    }
  }

  /// Standard normal by Box-Muller (one draw per call, no cached spare).
  double normal() {
    const double u = uniform_open(), v = uniform();
    return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * std::numbers::pi * v);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }
  int lane() const { return lane_; }

  /// Restores a position previously read from counter() and lane().
  void seek(std::uint64_t counter, int lane) {
    counter_ = counter;
    lane_ = 4;
    if (lane != 4 && counter > 0) {
      --counter_;
      (*this)();
      lane_ = lane;
    }
  }

private:
  std::uint64_t seed_, stream_;
  std::uint64_t counter_ = 0;
  Philox4 block_{};
  int lane_ = 4;
};

}  // namespace kacpotts
