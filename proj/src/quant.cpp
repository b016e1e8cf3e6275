#include "potq/quant.hpp"

#include <algorithm>
#include <cmath>

namespace potq {

const char* scheme_name(QuantScheme s) {
  switch (s) {
    case QuantScheme::None: return "none";
    case QuantScheme::AffineAsymmetric: return "affine";
    case QuantScheme::PowerOfTwo: return "pot";
  }
  return "?";
}

void QuantSpec::validate() const {
  if (scheme == QuantScheme::None) return;
  if (!(scale > 0.0f) || !std::isfinite(scale))
    throw std::invalid_argument("quant spec: scale must be positive and finite");
  if (scheme == QuantScheme::PowerOfTwo) {
    if (levels != 7 && levels != 9 && levels != 11 && levels != 15)
      throw std::invalid_argument("quant spec: PoT levels must be one of {7, 9, 11, 15}, got " +
                                  std::to_string(levels));
  } else {
    if (bits < 2 || bits > 8)
      throw std::invalid_argument("quant spec: affine bit width must be in [2, 8], got " + std::to_string(bits));
    if (zero_point < qmin() || zero_point > qmax())
      throw std::invalid_argument("quant spec: zero_point " + std::to_string(zero_point) +
                                  " outside [" + std::to_string(qmin()) + ", " + std::to_string(qmax()) + "]");
  }
}

QuantSpec QuantSpec::pot(int levels, float scale, SteMode ste) {
  QuantSpec s;
  s.scheme = QuantScheme::PowerOfTwo;
  s.levels = levels;
  s.scale = scale;
  s.ste = ste;
  s.validate();
  return s;
}

QuantSpec QuantSpec::affine(int bits, float scale, int32_t zero_point, SteMode ste) {
  QuantSpec s;
  s.scheme = QuantScheme::AffineAsymmetric;
  s.bits = bits;
  s.scale = scale;
  s.zero_point = zero_point;
  s.ste = ste;
  s.validate();
  return s;
}

void Observer::update(std::span<const float> xs) {
  for (const float v : xs) {
    min_seen = std::min(min_seen, v);
    max_seen = std::max(max_seen, v);
  }
  count += int64_t(xs.size());
}

std::vector<int32_t> affine_quantize(std::span<const float> xs, const QuantSpec& spec) {
  spec.validate();
  if (spec.scheme != QuantScheme::AffineAsymmetric)
    throw std::invalid_argument("affine_quantize: spec scheme is not affine");
  std::vector<int32_t> out(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) out[i] = affine_quantize_one(double(xs[i]), spec);
  return out;
}

std::vector<float> affine_dequantize(std::span<const int32_t> qs, const QuantSpec& spec) {
  spec.validate();
  std::vector<float> out(qs.size());
  for (size_t i = 0; i < qs.size(); ++i) out[i] = float(affine_dequantize_one(qs[i], spec));
  return out;
}

std::vector<PotCode> pot_quantize(std::span<const float> xs, const QuantSpec& spec) {
  spec.validate();
  if (spec.scheme != QuantScheme::PowerOfTwo)
    throw std::invalid_argument("pot_quantize: spec scheme is not power-of-two");
  std::vector<PotCode> out(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) out[i] = pot_quantize_one(double(xs[i]), spec);
  return out;
}

std::vector<float> pot_dequantize(std::span<const PotCode> codes, const QuantSpec& spec) {
  spec.validate();
  std::vector<float> out(codes.size());
  for (size_t i = 0; i < codes.size(); ++i) out[i] = float(pot_dequantize_one(codes[i], spec));
  return out;
}

float compute_scale_pot(float max_abs, int e_max) {
  if (max_abs < 0 || !std::isfinite(max_abs))
    throw std::invalid_argument("compute_scale_pot: max_abs must be finite and non-negative");
  if (max_abs == 0.0f) return 1.0f;
  return float(std::ldexp(double(max_abs), -e_max));
}

std::pair<float, int32_t> compute_scale_affine(float min_v, float max_v, int bits) {
  if (min_v > max_v) throw std::invalid_argument("compute_scale_affine: min exceeds max");
  min_v = std::min(min_v, 0.0f);
  max_v = std::max(max_v, 0.0f);
  if (min_v == 0.0f && max_v == 0.0f) return {1.0f, 0};
  const int32_t qmax = (1 << bits) - 1;
  const float s = float((double(max_v) - double(min_v)) / double(qmax));
  int32_t zp = int32_t(round_half_even(-double(min_v) / double(s)));
  zp = std::clamp(zp, 0, qmax);
  return {s, zp};
}

float max_abs(std::span<const float> xs) {
  float m = 0.0f;
  for (const float v : xs) m = std::max(m, std::fabs(v));
  return m;
}

std::vector<float> pot_level_set(const QuantSpec& spec) {
  spec.validate();
  std::vector<float> levels;
  for (int e = spec.e_max(); e >= 1; --e) levels.push_back(float(-std::ldexp(double(spec.scale), e)));
  levels.push_back(0.0f);
  for (int e = 1; e <= spec.e_max(); ++e) levels.push_back(float(std::ldexp(double(spec.scale), e)));
  return levels;
}

std::vector<uint8_t> pack_codes(std::span<const PotCode> codes) {
  std::vector<uint8_t> out((codes.size() + 1) / 2, 0);
  for (size_t i = 0; i < codes.size(); ++i) {
    const uint8_t c = codes[i] & 0xF;
    if (i % 2 == 0)
      out[i / 2] = c;
    else
      out[i / 2] |= uint8_t(c << 4);
  }
  return out;
}

std::vector<PotCode> unpack_codes(std::span<const uint8_t> bytes, int64_t numel) {
  if (numel < 0 || int64_t(bytes.size()) != (numel + 1) / 2)
    throw std::runtime_error("unpack_codes: byte length " + std::to_string(bytes.size()) +
                             " does not match element count " + std::to_string(numel));
  std::vector<PotCode> out(static_cast<size_t>(numel));
  for (int64_t i = 0; i < numel; ++i) {
    const uint8_t b = bytes[size_t(i / 2)];
    const uint8_t c = (i % 2 == 0) ? (b & 0xF) : (b >> 4);
    if ((c & 0x7) == 0 && c != kPotZeroCode)
      throw std::runtime_error("unpack_codes: invalid negative-zero nibble at element " + std::to_string(i));
    out[size_t(i)] = c;
  }
  if (numel % 2 == 1 && (bytes.back() >> 4) != 0)
    throw std::runtime_error("unpack_codes: nonzero padding nibble in final byte");
  return out;
}

void validate_codes(std::span<const PotCode> codes, int e_max) {
  for (size_t i = 0; i < codes.size(); ++i)
    if (!pot_code_valid(codes[i], e_max))
      throw std::runtime_error("pot codes: invalid code " + std::to_string(int(codes[i])) + " at element " +
                               std::to_string(i) + " for e_max " + std::to_string(e_max));
}

PackedPotTensor pot_pack_tensor(std::span<const float> w, Shape shape, const QuantSpec& spec) {
  spec.validate();
  if (int64_t(w.size()) != numel_of(shape))
    throw std::invalid_argument("pot_pack_tensor: data length does not match shape " + shape_str(shape));
  PackedPotTensor t;
  t.shape = std::move(shape);
  t.scale = spec.scale;
  t.levels = spec.levels;
  t.codes = pack_codes(pot_quantize(w, spec));
  return t;
}

std::vector<float> pot_unpack_tensor(const PackedPotTensor& t) {
  QuantSpec spec = QuantSpec::pot(t.levels, t.scale);
  auto codes = unpack_codes(t.codes, t.numel());
  validate_codes(codes, spec.e_max());
  return pot_dequantize(codes, spec);
}

QuantSpec weight_spec_for(const QuantSpec& base, std::span<const float> w) {
  QuantSpec spec = base;
  if (base.scheme == QuantScheme::PowerOfTwo) {
    spec.scale = compute_scale_pot(max_abs(w), base.e_max());
  } else if (base.scheme == QuantScheme::AffineAsymmetric) {
    float mn = 0.0f, mx = 0.0f;
    if (!w.empty()) {
      mn = w[0];
      mx = w[0];
      for (const float v : w) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
    }
    auto [s, zp] = compute_scale_affine(mn, mx, base.bits);
    spec.scale = s;
    spec.zero_point = zp;
  }
  return spec;
}

}  // namespace potq
