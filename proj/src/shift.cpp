#include "potq/shift.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>

#include "potq/ops.hpp"
#include "potq/rng.hpp"

namespace potq {

namespace shift_detail {

std::vector<int8_t> decode_weight_exponents(const PackedPotTensor& w) {
  const auto codes = unpack_codes(w.codes, w.numel());
  validate_codes(codes, w.e_max());
  std::vector<int8_t> out(codes.size());
  for (size_t i = 0; i < codes.size(); ++i) {
    const PotCode c = codes[i];
    const int m = c & 0x7;
    out[i] = (m == 0) ? kZeroWeight : int8_t((c & kPotSignBit) ? -m : m);
  }
  return out;
}

}  // namespace shift_detail

Tensor shift_matmul(const Tensor& x, const PackedPotTensor& w) {
  if (x.ndim() != 2 || w.shape.size() != 2)
    throw std::invalid_argument("shift_matmul: expects 2-D operands");
  const int64_t m = x.dim(0), k = x.dim(1), n = w.shape[1];
  if (w.shape[0] != k)
    throw std::invalid_argument("shift_matmul: inner dimensions differ, " + shape_str(x.shape()) + " vs " +
                                shape_str(w.shape));
  const auto wexp = shift_detail::decode_weight_exponents(w);
  auto out = Tensor::zeros({m, n});
  shift_detail::PlainOps ops;
  shift_detail::shift_matmul_kernel(x.data(), m, k, wexp.data(), n, w.scale, out.data(), ops);
  return out;
}

int64_t model_size_bytes(const Checkpoint& ckpt, TensorDtype dtype) {
  int64_t bytes = 0;
  for (const auto& t : ckpt.tensors) {
    const int64_t n = t.numel();
    if (dtype == TensorDtype::F32)
      bytes += 4 * n;
    else
      bytes += (n + 1) / 2 + 4;  // packed nibbles + per-tensor f32 scale
  }
  return bytes;
}

namespace {

SizeReport report_for_count(int64_t quantized_count, int64_t n_tensors, int64_t odd_tensors,
                            int64_t unquantized_bytes) {
  SizeReport r;
  r.param_count = quantized_count;
  r.f32_bytes = 4 * quantized_count;
  r.pot4_bytes = quantized_count * 4 / 8;  // 4 of 32 bits: exactly 87.5% off
  r.overhead_bytes = 4 * n_tensors + odd_tensors;
  r.unquantized_bytes = unquantized_bytes;
  r.saving_pct = 100.0 * (1.0 - 4.0 / 32.0);
  return r;
}

}  // namespace

SizeReport model_size_report(const Checkpoint& ckpt) {
  int64_t quantized = 0, rest = 0, n_tensors = 0, odd = 0;
  for (const auto& t : ckpt.tensors) {
    const bool q = t.dtype == TensorDtype::Pot4 || Model::is_matmul_weight(t.name);
    if (q) {
      quantized += t.numel();
      ++n_tensors;
      odd += t.numel() % 2;
    } else {
      rest += 4 * t.numel();
    }
  }
  return report_for_count(quantized, n_tensors, odd, rest);
}

SizeReport synthetic_size_report(int64_t param_count) {
  return report_for_count(param_count, 1, param_count % 2, 0);
}

std::string format_size_report(const SizeReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "quantized tensors: %ld params, %.0f MB (f32) -> %.0f MB (pot4), %.1f%% saving\n"
                "overhead: %ld bytes (scales + padding); unquantized tensors: %ld bytes\n",
                long(r.param_count), double(r.f32_bytes) / 1e6, double(r.pot4_bytes) / 1e6, r.saving_pct,
                long(r.overhead_bytes), long(r.unquantized_bytes));
  return buf;
}

int64_t ulp_distance(float a, float b) {
  const auto key = [](float v) -> int64_t {
    const int32_t bits = std::bit_cast<int32_t>(v);
    return bits >= 0 ? int64_t(bits) : int64_t(INT32_MIN) - int64_t(bits);
  };
  const int64_t d = key(a) - key(b);
  return d < 0 ? -d : d;
}

std::vector<BenchRow> bench_matmul(const std::vector<std::array<int64_t, 3>>& sizes, int repeats,
                                   uint64_t seed) {
  if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
  Pcg64 rng(seed);
  std::vector<BenchRow> rows;
  for (const auto& [m, k, n] : sizes) {
    if (m < 1 || k < 1 || n < 1) throw std::invalid_argument("bench: sizes must be >= 1");
    auto x = Tensor::zeros({m, k});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = float(rng.next_double() * 2.0 - 1.0);
    std::vector<float> wf(static_cast<size_t>(k * n));
    for (auto& v : wf) v = float(rng.next_normal() * 0.05);
    QuantSpec spec = QuantSpec::pot(15);
    spec.scale = compute_scale_pot(max_abs(wf), spec.e_max());
    const PackedPotTensor packed = pot_pack_tensor(wf, {k, n}, spec);
    const auto wdeq = pot_unpack_tensor(packed);
    const Tensor wt = Tensor::from_data({k, n}, wdeq);

    const auto time_ns = [&](auto&& fn) {
      std::vector<double> ts;
      for (int r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        ts.push_back(double(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
      }
      std::sort(ts.begin(), ts.end());
      return ts[ts.size() / 2];
    };

    Tensor of, os;
    BenchRow row;
    row.m = m;
    row.k = k;
    row.n = n;
    row.float_ns = time_ns([&] { of = matmul(x, wt); });
    row.shift_ns = time_ns([&] { os = shift_matmul(x, packed); });
    row.ratio = row.shift_ns > 0 ? row.float_ns / row.shift_ns : 0.0;
    for (int64_t i = 0; i < of.numel(); ++i)
      row.max_ulp = std::max(row.max_ulp, ulp_distance(of.data()[i], os.data()[i]));
    rows.push_back(row);
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "m,k,n,float_ns,shift_ns,ratio\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%ld,%ld,%.0f,%.0f,%.4f\n", long(r.m), long(r.k), long(r.n),
                  r.float_ns, r.shift_ns, r.ratio);
    out += buf;
  }
  return out;
}

}  // namespace potq
