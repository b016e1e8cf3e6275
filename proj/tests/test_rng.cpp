#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "potq/rng.hpp"

using namespace potq;

TEST_CASE("pcg64 matches the reference stream for seed 42 / stream 54") {
  // Frozen from an independent implementation of PCG64 XSL-RR 128/64 with
  // setseq seeding and pre-advance output, cross-checked against numpy's
  // PCG64 core (numpy emits the same stream shifted by one step because it
  // mixes the post-advance state).
  const std::vector<uint64_t> expected = {
      0xba14bfffc8f1861bull, 0x86b1da1d72062b68ull, 0x1304aa46c9853d39ull, 0xa3670e9e0dd50358ull,
      0xf9090e529a7dae00ull, 0xc85b9fd837996f2cull, 0x606121f8e3919196ull, 0x7ce1c7ff478354baull,
      0xcbc4ac70e541310eull, 0x74be71999ec37f2cull,
  };
  Pcg64 rng(42, 54);
  for (const uint64_t e : expected) CHECK(rng.next_u64() == e);
}

TEST_CASE("identical seeds give identical streams, different streams diverge") {
  Pcg64 a(123, 7), b(123, 7), c(123, 8), d(124, 7);
  bool stream_differs = false, seed_differs = false;
  for (int i = 0; i < 64; ++i) {
    const uint64_t va = a.next_u64();
    CHECK(va == b.next_u64());
    stream_differs |= va != c.next_u64();
    seed_differs |= va != d.next_u64();
  }
  CHECK(stream_differs);
  CHECK(seed_differs);
}

TEST_CASE("next_double is in [0,1) and next_below respects its bound") {
  Pcg64 rng(99);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.next_double();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  for (int i = 0; i < 10000; ++i) CHECK(rng.next_below(37) < 37);
  CHECK(rng.next_below(1) == 0);
}

TEST_CASE("next_normal has sane moments") {
  Pcg64 rng(2024);
  const int n = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.next_normal();
    sum += z;
    sq += z * z;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::fabs(mean) < 0.01);
  CHECK(std::fabs(var - 1.0) < 0.02);
}
