#pragma once

// Affine and power-of-two quantizers, min/max observers, the 4-bit PoT code
// format, and the fake-quantize autodiff node with straight-through backward.
//
// PoT codes are 4 bits: bit 3 is the sign (1 = negative), bits 0..2 hold the
// magnitude m. m == 0 encodes the value zero (canonically 0b0000; 0b1000 is
// rejected), m == e in [1, e_max] encodes magnitude scale * 2^e. A spec with
// `levels` total values has e_max = (levels - 1) / 2.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "potq/tensor.hpp"

namespace potq {

enum class QuantScheme : uint8_t { None = 0, AffineAsymmetric = 1, PowerOfTwo = 2 };
enum class SteMode : uint8_t { Identity = 0, Clipped = 1 };

const char* scheme_name(QuantScheme s);

struct QuantSpec {
  QuantScheme scheme = QuantScheme::PowerOfTwo;
  int levels = 15;        // PoT: total level count, odd
  int bits = 8;           // affine: bit width
  float scale = 1.0f;
  int32_t zero_point = 0; // affine only
  SteMode ste = SteMode::Identity;

  int e_max() const { return (levels - 1) / 2; }
  int32_t qmin() const { return 0; }
  int32_t qmax() const { return (1 << bits) - 1; }
  void validate() const;

  static QuantSpec pot(int levels, float scale = 1.0f, SteMode ste = SteMode::Identity);
  static QuantSpec affine(int bits, float scale = 1.0f, int32_t zero_point = 0,
                          SteMode ste = SteMode::Identity);
};

// Running min/max signal statistics feeding scale derivation.
struct Observer {
  float min_seen = std::numeric_limits<float>::infinity();
  float max_seen = -std::numeric_limits<float>::infinity();
  int64_t count = 0;

  void update(std::span<const float> xs);
};

// ---- scalar quantizer math (double domain, round-half-to-even) ----

// The default FP environment rounds to nearest-even and is never changed.
inline double round_half_even(double v) { return std::nearbyint(v); }

using PotCode = uint8_t;
inline constexpr PotCode kPotZeroCode = 0;
inline constexpr PotCode kPotSignBit = 0x8;
inline constexpr double kPotZeroFlush = 1.4142135623730951;  // 2^0.5, log-domain midpoint below 2^1

inline bool pot_code_valid(PotCode c, int e_max) {
  if (c > 0xF) return false;
  const int m = c & 0x7;
  if (m == 0) return c == kPotZeroCode;  // 0b1000 (negative zero) is invalid
  return m <= e_max;
}

// assumes spec.validate() passed
inline PotCode pot_quantize_one(double x, const QuantSpec& spec) {
  const double v = std::fabs(x) / double(spec.scale);
  if (v < kPotZeroFlush) return kPotZeroCode;
  int e = int(round_half_even(std::log2(v)));
  e = std::clamp(e, 1, spec.e_max());
  return PotCode((x < 0 ? kPotSignBit : 0) | e);
}

inline double pot_dequantize_one(PotCode c, const QuantSpec& spec) {
  if (!pot_code_valid(c, spec.e_max()))
    throw std::runtime_error("pot_dequantize: invalid code " + std::to_string(int(c)) + " for e_max " +
                             std::to_string(spec.e_max()));
  const int m = c & 0x7;
  if (m == 0) return 0.0;
  const double mag = std::ldexp(double(spec.scale), m);
  return (c & kPotSignBit) ? -mag : mag;
}

inline int32_t affine_quantize_one(double x, const QuantSpec& spec) {
  const int32_t q = int32_t(round_half_even(x / double(spec.scale))) + spec.zero_point;
  return std::clamp(q, spec.qmin(), spec.qmax());
}

inline double affine_dequantize_one(int32_t q, const QuantSpec& spec) {
  return double(q - spec.zero_point) * double(spec.scale);
}

// ---- array quantizers ----

std::vector<int32_t> affine_quantize(std::span<const float> xs, const QuantSpec& spec);
std::vector<float> affine_dequantize(std::span<const int32_t> qs, const QuantSpec& spec);
std::vector<PotCode> pot_quantize(std::span<const float> xs, const QuantSpec& spec);
std::vector<float> pot_dequantize(std::span<const PotCode> codes, const QuantSpec& spec);

// ---- scale derivation ----

// Anchors the top PoT level at the observed extreme: scale = max_abs / 2^e_max.
// A degenerate all-zero tensor gets scale 1 so every code is the zero code.
float compute_scale_pot(float max_abs, int e_max);

// Min/max affine derivation; the range is widened to include zero and the
// degenerate zero range maps to (1, 0).
std::pair<float, int32_t> compute_scale_affine(float min_v, float max_v, int bits);

float max_abs(std::span<const float> xs);

// All representable values of a PoT spec, sorted ascending: exactly `levels`.
std::vector<float> pot_level_set(const QuantSpec& spec);

// ---- 4-bit packing ----

// Two codes per byte, low nibble = even index; an odd tail pads the high
// nibble with zero.
std::vector<uint8_t> pack_codes(std::span<const PotCode> codes);
std::vector<PotCode> unpack_codes(std::span<const uint8_t> bytes, int64_t numel);
void validate_codes(std::span<const PotCode> codes, int e_max);

// Storage form of a PoT-quantized tensor: per-tensor scale plus packed codes.
struct PackedPotTensor {
  Shape shape;
  float scale = 1.0f;
  int levels = 15;
  std::vector<uint8_t> codes;

  int64_t numel() const { return numel_of(shape); }
  int e_max() const { return (levels - 1) / 2; }
};

PackedPotTensor pot_pack_tensor(std::span<const float> w, Shape shape, const QuantSpec& spec);
std::vector<float> pot_unpack_tensor(const PackedPotTensor& t);

// ---- fake quantization (quantize + dequantize, STE backward) ----

template <class S>
TensorT<S> fake_quant(const TensorT<S>& x, const QuantSpec& spec) {
  spec.validate();
  if (spec.scheme == QuantScheme::None)
    throw std::invalid_argument("fake_quant: scheme must be affine or power-of-two");
  auto out = TensorT<S>::zeros(x.shape());
  const int64_t n = x.numel();
  if (spec.scheme == QuantScheme::PowerOfTwo) {
    for (int64_t i = 0; i < n; ++i)
      out.data()[i] = S(pot_dequantize_one(pot_quantize_one(double(x.data()[i]), spec), spec));
  } else {
    for (int64_t i = 0; i < n; ++i)
      out.data()[i] = S(affine_dequantize_one(affine_quantize_one(double(x.data()[i]), spec), spec));
  }
  check_finite(out, "fake_quant");

  if (detail::should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    active_graph<S>()->record("fake_quant", {x.id()}, out.id(), [xs, os, spec, n] {
      if (os->grad.empty() || !xs->requires_grad) return;
      if (xs->grad.empty()) xs->grad.assign(xs->data.size(), S(0));
      if (spec.ste == SteMode::Identity) {
        for (int64_t i = 0; i < n; ++i) xs->grad[size_t(i)] += os->grad[size_t(i)];
      } else {
        // gradient is zeroed where x falls outside the representable range
        double lo, hi;
        if (spec.scheme == QuantScheme::PowerOfTwo) {
          hi = std::ldexp(double(spec.scale), spec.e_max());
          lo = -hi;
        } else {
          lo = double(spec.qmin() - spec.zero_point) * double(spec.scale);
          hi = double(spec.qmax() - spec.zero_point) * double(spec.scale);
        }
        for (int64_t i = 0; i < n; ++i) {
          const double v = double(xs->data[size_t(i)]);
          if (v >= lo && v <= hi) xs->grad[size_t(i)] += os->grad[size_t(i)];
        }
      }
    });
  }
  return out;
}

// Derives the per-tensor spec for a weight tensor from its current values
// (max-abs anchoring for PoT, min/max for affine).
QuantSpec weight_spec_for(const QuantSpec& base, std::span<const float> w);

}  // namespace potq
