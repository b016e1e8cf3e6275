#pragma once

// PCG64: the XSL-RR 128/64 member of the PCG family with the "setseq"
// stream-selection seeding, outputting the pre-advance state (matches the
// reference pcg-cpp pcg64 engine). All randomness in this project flows
// through this generator so runs are reproducible bit-for-bit from a seed.

#include <cmath>
#include <cstdint>

namespace potq {

class Pcg64 {
 public:
  using u128 = unsigned __int128;

  explicit Pcg64(uint64_t seed, uint64_t stream = 0) : state_(0), inc_((u128(stream) << 1) | 1) {
    step();
    state_ += seed;
    step();
  }

  uint64_t next_u64() {
    const u128 old = state_;
    step();
    const uint64_t xored = uint64_t(old >> 64) ^ uint64_t(old);
    const unsigned rot = unsigned(old >> 122);
    return (xored >> rot) | (xored << ((64u - rot) & 63u));
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, bound) via Lemire's multiply-and-reject.
  uint64_t next_below(uint64_t bound) {
    u128 m = u128(next_u64()) * bound;
    auto lo = uint64_t(m);
    if (lo < bound) {
      const uint64_t threshold = (0 - bound) % bound;
      while (lo < threshold) {
        m = u128(next_u64()) * bound;
        lo = uint64_t(m);
      }
    }
    return uint64_t(m >> 64);
  }

  // Standard normal via Box-Muller (pinned algorithm, two values per pair).
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  void step() { state_ = state_ * mult() + inc_; }
  static constexpr u128 mult() { return (u128(2549297995355413924ull) << 64) | 4865540595714422341ull; }

  u128 state_;
  u128 inc_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Fixed sub-stream ids so one CLI --seed drives independent generators.
namespace rng_stream {
inline constexpr uint64_t kInit = 1;     // parameter initialization
inline constexpr uint64_t kData = 2;     // training batch sampling
inline constexpr uint64_t kDropout = 3;  // dropout masks
inline constexpr uint64_t kEval = 4;     // evaluation batch sampling
inline constexpr uint64_t kGenerate = 5; // sampling during generation
inline constexpr uint64_t kCorpus = 6;   // synthetic corpus generation
}  // namespace rng_stream

}  // namespace potq
