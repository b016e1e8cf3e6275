#pragma once

// Multiplication-free matmul against PoT-packed weights. Weight application
// is exponent-field addition on the activation's float representation; the
// only scalar multiply is the single per-output rescale by the tensor scale.
//
// The kernel is templated on an arithmetic policy so tests can instantiate it
// with a counting policy and assert the multiply budget structurally.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "potq/checkpoint.hpp"
#include "potq/quant.hpp"
#include "potq/tensor.hpp"

namespace potq {

namespace shift_detail {

// sentinel exponent for the zero code; otherwise signed exponent in [-7, 7]
inline constexpr int8_t kZeroWeight = int8_t(-128);

// x * 2^e via exponent-field addition; ldexp fallback covers zero, subnormal
// and overflow inputs.
inline double exp2_shift(double x, int e) {
  const uint64_t bits = std::bit_cast<uint64_t>(x);
  const uint64_t expf = (bits >> 52) & 0x7FFull;
  if (expf == 0 || expf + uint64_t(e) >= 0x7FFull) return std::ldexp(x, e);
  return std::bit_cast<double>(bits + (uint64_t(e) << 52));
}

struct PlainOps {
  static double shift(double x, int e) { return exp2_shift(x, e); }
  static double add(double a, double b) { return a + b; }
  static double sub(double a, double b) { return a - b; }
  static float rescale(double acc, float s) { return float(double(s) * acc); }
};

struct CountingOps {
  int64_t shifts = 0;
  int64_t adds = 0;
  int64_t muls = 0;
  double shift(double x, int e) {
    ++shifts;
    return exp2_shift(x, e);
  }
  double add(double a, double b) {
    ++adds;
    return a + b;
  }
  double sub(double a, double b) {
    ++adds;
    return a - b;
  }
  float rescale(double acc, float s) {
    ++muls;
    return float(double(s) * acc);
  }
};

// Decodes packed nibbles to signed exponents (no arithmetic on values).
std::vector<int8_t> decode_weight_exponents(const PackedPotTensor& w);

// out[m,n] = scale * sum_k sign * (x[m,k] << e); policy instances must be
// callable per element. Accumulation is in double, k ascending.
template <class Ops>
void shift_matmul_kernel(const float* x, int64_t m, int64_t k, const int8_t* wexp, int64_t n, float scale,
                         float* out, Ops& ops) {
#pragma omp parallel for schedule(static) if (m > 1 && m * k * n > 32768)
  for (int64_t i = 0; i < m; ++i) {
    std::vector<double> acc(size_t(n), 0.0);
    const float* xrow = x + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double xv = double(xrow[p]);
      if (xv == 0.0) continue;  // shifted zeros contribute nothing
      const int8_t* wrow = wexp + p * n;
      for (int64_t j = 0; j < n; ++j) {
        const int8_t e = wrow[j];
        if (e == kZeroWeight) continue;
        const double term = ops.shift(xv, e < 0 ? -e : e);
        acc[size_t(j)] = e < 0 ? ops.sub(acc[size_t(j)], term) : ops.add(acc[size_t(j)], term);
      }
    }
    float* orow = out + i * n;
    for (int64_t j = 0; j < n; ++j) orow[j] = ops.rescale(acc[size_t(j)], scale);
  }
}

}  // namespace shift_detail

// x is [m, k] float activations, w is a [k, n] PoT-packed weight tensor.
Tensor shift_matmul(const Tensor& x, const PackedPotTensor& w);

// ---- size accounting ----

struct SizeReport {
  int64_t param_count = 0;        // elements counted at the quantized dtype
  int64_t f32_bytes = 0;          // same elements as f32
  int64_t pot4_bytes = 0;         // pure 4-bit payload (bits / 8)
  int64_t overhead_bytes = 0;     // per-tensor scales + odd-count padding
  int64_t unquantized_bytes = 0;  // tensors kept in f32 (layernorm, biases...)
  double saving_pct = 0.0;        // payload saving on quantized tensors
};

// Byte size of the checkpoint's tensor payloads if stored at `dtype`.
int64_t model_size_bytes(const Checkpoint& ckpt, TensorDtype dtype);

// Accounting over the checkpoint's quantizable tensors (matmul weights).
SizeReport model_size_report(const Checkpoint& ckpt);

// Accounting for a hypothetical model of param_count quantized parameters.
SizeReport synthetic_size_report(int64_t param_count);

std::string format_size_report(const SizeReport& r);

// ---- benchmarking ----

struct BenchRow {
  int64_t m = 0, k = 0, n = 0;
  double float_ns = 0.0;
  double shift_ns = 0.0;
  double ratio = 0.0;  // float_ns / shift_ns
  int64_t max_ulp = 0; // worst element disagreement between the two kernels
};

// Medians of `repeats` timed runs per shape; each run also cross-checks the
// two kernels against each other.
std::vector<BenchRow> bench_matmul(const std::vector<std::array<int64_t, 3>>& sizes, int repeats,
                                   uint64_t seed);

std::string bench_csv(const std::vector<BenchRow>& rows);

// distance in representable float steps (0 means bit-identical)
int64_t ulp_distance(float a, float b);

}  // namespace potq
