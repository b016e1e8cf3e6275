#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "potq/quant.hpp"
#include "potq/rng.hpp"
#include "potq/tensor.hpp"

using namespace potq;

namespace {

// Brute-force nearest-in-log-domain oracle over the level set: zero wins
// below the geometric midpoint 2^0.5, otherwise the exponent minimizing
// |log2(|x|/scale) - e| (ties to the even exponent, matching
// round-half-to-even).
PotCode pot_oracle(double x, const QuantSpec& spec) {
  const double v = std::fabs(x) / double(spec.scale);
  if (v < std::sqrt(2.0)) return kPotZeroCode;
  const double lv = std::log2(v);
  int best_e = 1;
  double best_d = std::fabs(lv - 1.0);
  for (int e = 2; e <= spec.e_max(); ++e) {
    const double d = std::fabs(lv - double(e));
    if (d < best_d || (d == best_d && e % 2 == 0)) {
      best_d = d;
      best_e = e;
    }
  }
  return PotCode((x < 0 ? kPotSignBit : 0) | best_e);
}

}  // namespace

TEST_CASE("round_half_even ties go to the even neighbor") {
  CHECK(round_half_even(0.5) == 0.0);
  CHECK(round_half_even(1.5) == 2.0);
  CHECK(round_half_even(2.5) == 2.0);
  CHECK(round_half_even(-0.5) == 0.0);
  CHECK(round_half_even(-1.5) == -2.0);
  CHECK(round_half_even(127.5) == 128.0);
}

TEST_CASE("affine quantize: grid point, zero, and the [-1,1] 8-bit example") {
  auto spec = QuantSpec::affine(8, 0.25f, 0);
  CHECK(affine_quantize_one(0.5, spec) == 2);
  CHECK(affine_quantize_one(0.0, spec) == spec.zero_point);
  CHECK(affine_dequantize_one(2, spec) == doctest::Approx(0.5));
  CHECK(affine_dequantize_one(spec.zero_point, spec) == 0.0);

  const auto [s, zp] = compute_scale_affine(-1.0f, 1.0f, 8);
  CHECK(s == doctest::Approx(2.0 / 255.0).epsilon(1e-7));
  CHECK(zp == 128);
  auto spec2 = QuantSpec::affine(8, s, zp);
  CHECK(affine_quantize_one(1.0, spec2) == 255);  // clamped top of range
  CHECK(affine_quantize_one(-1.0, spec2) == 0);
}

TEST_CASE("affine round-trip is idempotent on grid values") {
  auto spec = QuantSpec::affine(8, 0.013f, 117);
  for (int q = 0; q <= 255; ++q) {
    const double x = affine_dequantize_one(q, spec);
    CHECK(affine_quantize_one(x, spec) == q);
  }
}

TEST_CASE("affine spec validation") {
  QuantSpec bad = QuantSpec::affine(8, 1.0f, 0);
  bad.scale = 0.0f;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.scale = -1.0f;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_THROWS_AS((void)QuantSpec::affine(1, 1.0f, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)QuantSpec::affine(9, 1.0f, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)QuantSpec::affine(8, 1.0f, 256), std::invalid_argument);
}

TEST_CASE("pot quantize: zero, exact level, log rounding and clipping") {
  auto spec = QuantSpec::pot(15);  // e_max = 7, scale 1
  CHECK(pot_quantize_one(0.0, spec) == kPotZeroCode);
  CHECK(pot_quantize_one(2.0, spec) == PotCode(1));
  CHECK(pot_dequantize_one(PotCode(1), spec) == doctest::Approx(2.0));
  // round(log2 96) = round(6.585) = 7 -> -128
  CHECK(pot_quantize_one(-96.0, spec) == PotCode(kPotSignBit | 7));
  CHECK(pot_dequantize_one(PotCode(kPotSignBit | 7), spec) == doctest::Approx(-128.0));
  // 300 clips to the top level
  CHECK(pot_quantize_one(300.0, spec) == PotCode(7));
  CHECK(pot_dequantize_one(PotCode(7), spec) == doctest::Approx(128.0));
  // fake-quant example: 3 -> 4 (round(log2 3) = 2)
  CHECK(pot_dequantize_one(pot_quantize_one(3.0, spec), spec) == doctest::Approx(4.0));
}

TEST_CASE("pot zero-flush boundary sits at scale * 2^0.5") {
  auto spec = QuantSpec::pot(15);
  CHECK(pot_quantize_one(std::nextafter(kPotZeroFlush, 0.0), spec) == kPotZeroCode);
  CHECK(pot_quantize_one(kPotZeroFlush, spec) == PotCode(1));  // boundary lifts to level 1
  CHECK(pot_quantize_one(-1.0, spec) == kPotZeroCode);         // negative small value flushes too
}

TEST_CASE("pot dequantize rejects invalid codes") {
  auto spec7 = QuantSpec::pot(7);  // e_max = 3
  CHECK_THROWS_AS((void)pot_dequantize_one(PotCode(4), spec7), std::runtime_error);   // m > e_max
  CHECK_THROWS_AS((void)pot_dequantize_one(PotCode(0x8), spec7), std::runtime_error); // negative zero
  CHECK_NOTHROW((void)pot_dequantize_one(PotCode(3), spec7));
}

TEST_CASE("pot code round-trip is exact over all valid codes") {
  for (const int levels : {7, 9, 11, 15}) {
    auto spec = QuantSpec::pot(levels, 0.037f);
    for (int sign = 0; sign <= 1; ++sign) {
      for (int m = 0; m <= spec.e_max(); ++m) {
        if (sign == 1 && m == 0) continue;  // negative zero does not exist
        const PotCode c = PotCode((sign ? kPotSignBit : 0) | m);
        const double x = pot_dequantize_one(c, spec);
        CHECK(pot_quantize_one(x, spec) == c);
      }
    }
  }
}

TEST_CASE("pot quantizer matches the log-domain oracle on random values") {
  Pcg64 rng(808);
  for (const int levels : {7, 11, 15}) {
    for (const float scale : {1.0f, 0.0123f, 7.5f}) {
      auto spec = QuantSpec::pot(levels, scale);
      for (int i = 0; i < 2000; ++i) {
        const double x = (rng.next_double() * 2.0 - 1.0) * 1e3;
        CHECK(pot_quantize_one(x, spec) == pot_oracle(x, spec));
      }
    }
  }
}

TEST_CASE("pot level set has exactly `levels` distinct values with the right range") {
  // level count <-> range pairs: 7 <-> [-2^3, 2^3], 11 <-> [-2^5, 2^5],
  // 15 <-> [-2^7, 2^7]
  const std::vector<std::pair<int, double>> cases = {{7, 8.0}, {9, 16.0}, {11, 32.0}, {15, 128.0}};
  for (const auto& [levels, top] : cases) {
    auto spec = QuantSpec::pot(levels);
    const auto set = pot_level_set(spec);
    CHECK(int(set.size()) == levels);
    CHECK(std::set<float>(set.begin(), set.end()).size() == size_t(levels));
    CHECK(set.front() == doctest::Approx(-top));
    CHECK(set.back() == doctest::Approx(top));
    CHECK(std::is_sorted(set.begin(), set.end()));

    // the image of dequantize over all valid codes is exactly this set
    std::set<float> image;
    for (int sign = 0; sign <= 1; ++sign)
      for (int m = 0; m <= spec.e_max(); ++m) {
        if (sign == 1 && m == 0) continue;
        image.insert(float(pot_dequantize_one(PotCode((sign ? kPotSignBit : 0) | m), spec)));
      }
    CHECK(image.size() == size_t(levels));
  }
}

TEST_CASE("compute_scale_pot anchors the top level at max-abs") {
  CHECK(compute_scale_pot(128.0f, 7) == doctest::Approx(1.0));
  CHECK(compute_scale_pot(0.0f, 7) == 1.0f);  // degenerate tensor
  const float s = compute_scale_pot(0.3f, 5);
  CHECK(s == doctest::Approx(0.3 / 32.0));
  auto spec = QuantSpec::pot(11, s);
  CHECK(pot_dequantize_one(pot_quantize_one(0.3, spec), spec) == doctest::Approx(0.3).epsilon(1e-7));
}

TEST_CASE("compute_scale_affine widens to zero and handles the degenerate range") {
  const auto [s0, zp0] = compute_scale_affine(0.0f, 0.0f, 8);
  CHECK(s0 == 1.0f);
  CHECK(zp0 == 0);
  const auto [s1, zp1] = compute_scale_affine(0.0f, 255.0f * 0.004f, 8);
  CHECK(s1 == doctest::Approx(0.004));
  CHECK(zp1 == 0);
  const auto [s2, zp2] = compute_scale_affine(2.0f, 6.0f, 8);  // range must include 0
  CHECK(s2 == doctest::Approx(6.0 / 255.0));
  CHECK(zp2 == 0);
}

TEST_CASE("observer tracks running extremes monotonically") {
  Observer obs;
  const std::vector<float> a = {1, 2, 3};
  obs.update(a);
  CHECK(obs.min_seen == 1.0f);
  CHECK(obs.max_seen == 3.0f);
  CHECK(obs.count == 3);
  const std::vector<float> b = {0, 5};
  obs.update(b);
  CHECK(obs.min_seen == 0.0f);
  CHECK(obs.max_seen == 5.0f);
  const std::vector<float> c = {2};
  obs.update(c);
  CHECK(obs.min_seen == 0.0f);  // no-op inside the seen range
  CHECK(obs.max_seen == 5.0f);
  CHECK(obs.count == 6);
}

TEST_CASE("fake_quant is a fixpoint on grid values and idempotent") {
  Pcg64 rng(77);
  for (const int levels : {7, 15}) {
    auto spec = QuantSpec::pot(levels, 0.02f);
    auto x = Tensor::zeros({1, 64});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = float(rng.next_normal());
    auto once = fake_quant(x, spec);
    auto twice = fake_quant(once, spec);
    CHECK(once.vec() == twice.vec());

    // grid values are exact fixpoints
    const auto grid = pot_level_set(spec);
    auto g = Tensor::from_data({1, int64_t(grid.size())}, grid);
    CHECK(fake_quant(g, spec).vec() == grid);
  }
  auto aspec = QuantSpec::affine(8, 0.031f, 99);
  auto x = Tensor::zeros({1, 128});
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = float(rng.next_normal());
  auto once = fake_quant(x, aspec);
  CHECK(fake_quant(once, aspec).vec() == once.vec());
}

TEST_CASE("fake_quant is monotone in its input for both schemes") {
  Pcg64 rng(78);
  std::vector<float> xs(512);
  for (auto& v : xs) v = float(rng.next_normal() * 3.0);
  std::sort(xs.begin(), xs.end());
  auto x = Tensor::from_data({1, int64_t(xs.size())}, xs);
  for (const auto& spec : {QuantSpec::pot(11, 0.05f), QuantSpec::affine(4, 0.5f, 8)}) {
    auto y = fake_quant(x, spec);
    for (int64_t i = 1; i < y.numel(); ++i) CHECK(y.data()[i] >= y.data()[i - 1]);
  }
}

TEST_CASE("ste identity passes the upstream gradient through bit-exactly") {
  Pcg64 rng(79);
  auto x = Tensor::zeros({1, 100}, true);
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = float(rng.next_normal() * 10.0);
  auto spec = QuantSpec::pot(15, 0.01f);  // many values land beyond the top level

  Graph g;
  TapeScope scope(g);
  auto y = fake_quant(x, spec);
  // seed the output grad with arbitrary values by scaling before sum
  auto w = Tensor::zeros({1, 100});
  for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = float(rng.next_normal());
  auto loss = sum(mul(y, w));
  g.backward(loss);
  // through identity STE, d loss / dx == w exactly
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[size_t(i)] == w.data()[i]);
}

TEST_CASE("ste clipped zeroes the gradient outside the representable range") {
  auto spec = QuantSpec::pot(7, 1.0f, SteMode::Clipped);  // top level 8
  auto x = Tensor::from_data({1, 4}, {80.0f, -80.0f, 3.0f, -0.5f}, true);
  Graph g;
  TapeScope scope(g);
  g.backward(sum(fake_quant(x, spec)));
  CHECK(x.grad()[0] == 0.0f);  // 10x the top level
  CHECK(x.grad()[1] == 0.0f);
  CHECK(x.grad()[2] == 1.0f);
  CHECK(x.grad()[3] == 1.0f);
}

TEST_CASE("end-to-end: identity-STE fake quant leaves the gradient of a chain unchanged") {
  Pcg64 rng(80);
  auto make = [&](bool with_fq) {
    Pcg64 r(42);
    auto x = Tensor::zeros({4, 8}, true);
    auto w = Tensor::zeros({8, 4}, true);
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = float(r.next_normal());
    for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = float(r.next_normal());
    Graph g;
    TapeScope scope(g);
    auto wq = with_fq ? fake_quant(w, QuantSpec::pot(15, compute_scale_pot(max_abs(w.vec()), 7))) : w;
    // loss reads the quantized image but the gradient lands on w
    auto y = matmul(x, wq);
    g.backward(sum(y));
    return w.grad();
  };
  // gradients w.r.t. w match bit-exactly because d(sum(x*wq))/dwq flows
  // through the identity STE
  CHECK(make(true) == make(false));
}

TEST_CASE("pack/unpack: layout example, odd padding, and property round-trip") {
  // [(+,5), (-,1)] -> low nibble 0101, high nibble 1001 -> 0b10010101
  const std::vector<PotCode> two = {PotCode(5), PotCode(kPotSignBit | 1)};
  const auto packed = pack_codes(two);
  REQUIRE(packed.size() == 1);
  CHECK(packed[0] == 0b10010101);
  CHECK(unpack_codes(packed, 2) == two);

  const std::vector<PotCode> odd = {PotCode(3)};
  const auto p1 = pack_codes(odd);
  REQUIRE(p1.size() == 1);
  CHECK((p1[0] >> 4) == 0);  // padded nibble is zero
  CHECK(unpack_codes(p1, 1) == odd);

  Pcg64 rng(4242);
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t n = int64_t(rng.next_below(50));
    std::vector<PotCode> codes(size_t(n));
    for (auto& c : codes) {
      const int m = int(rng.next_below(8));
      c = PotCode(m == 0 ? 0 : ((rng.next_below(2) << 3) | m));
    }
    CHECK(unpack_codes(pack_codes(codes), n) == codes);
  }
}

TEST_CASE("unpack rejects malformed payloads") {
  CHECK_THROWS_AS((void)unpack_codes(std::vector<uint8_t>{0x08}, 2), std::runtime_error);  // negative zero
  CHECK_THROWS_AS((void)unpack_codes(std::vector<uint8_t>{0x31}, 1), std::runtime_error);  // nonzero pad
  CHECK_THROWS_AS((void)unpack_codes(std::vector<uint8_t>{0x01, 0x02}, 2), std::runtime_error);  // length
  CHECK_THROWS_AS(validate_codes(std::vector<PotCode>{PotCode(5)}, 3), std::runtime_error);  // m > e_max
}

TEST_CASE("packed tensor: dequantized values are recovered exactly") {
  Pcg64 rng(11);
  std::vector<float> w(129);  // odd length exercises padding
  for (auto& v : w) v = float(rng.next_normal() * 0.1);
  QuantSpec spec = QuantSpec::pot(15, compute_scale_pot(max_abs(w), 7));
  const auto packed = pot_pack_tensor(w, {129}, spec);
  CHECK(packed.codes.size() == 65);
  const auto deq = pot_unpack_tensor(packed);
  const auto direct = pot_dequantize(pot_quantize(w, spec), spec);
  CHECK(deq == direct);

  // every decoded value is zero or +-scale*2^e with integer e in [1, e_max]
  for (const float v : deq) {
    if (v == 0.0f) continue;
    const double e = std::log2(std::fabs(double(v)) / double(spec.scale));
    CHECK(e == doctest::Approx(std::round(e)).epsilon(1e-9));
    CHECK(e >= 1.0);
    CHECK(e <= 7.0);
  }
}

TEST_CASE("all-zero tensors quantize to all zero codes with scale 1") {
  const std::vector<float> w(64, 0.0f);
  QuantSpec spec = QuantSpec::pot(15, compute_scale_pot(max_abs(w), 7));
  CHECK(spec.scale == 1.0f);
  for (const PotCode c : pot_quantize(w, spec)) CHECK(c == kPotZeroCode);
}
