#pragma once

// Forward kernels and their backward closures. Every reduction accumulates in
// double with a fixed (ascending-index) order; OpenMP parallelism is only
// over independent output rows, so results are identical at any thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "potq/rng.hpp"
#include "potq/tensor.hpp"

namespace potq {

namespace detail {

// The matmul kernels accumulate in double, k ascending, with output columns
// blocked 2x16 so the accumulators stay in registers across the k loop. The
// per-output reduction order is independent of blocking and thread count.

// out_row[0..n) (+)= sum_p bc[p * bstride] * rows[p * rstride + 0..n). The
// broadcast stride is folded at compile time so the hot unit-stride path
// keeps the 32 accumulators in registers across the k loop.
template <class S, bool kAccumulate, bool kUnitBStride>
inline void gemm_row(const S* bc, int64_t bstride, const S* rows, int64_t rstride, int64_t k, int64_t n,
                     S* out_row) {
  int64_t jb = 0;
  for (; jb + 32 <= n; jb += 32) {
    double acc[32] = {0};
    for (int64_t p = 0; p < k; ++p) {
      const double av = double(bc[kUnitBStride ? p : p * bstride]);
      const S* br = rows + p * rstride + jb;
      for (int j = 0; j < 32; ++j) acc[j] += av * double(br[j]);
    }
    for (int j = 0; j < 32; ++j)
      out_row[jb + j] = kAccumulate ? S(double(out_row[jb + j]) + acc[j]) : S(acc[j]);
  }
  if (jb < n) {
    const int w = int(n - jb);
    double acc[32] = {0};
    for (int64_t p = 0; p < k; ++p) {
      const double av = double(bc[kUnitBStride ? p : p * bstride]);
      const S* br = rows + p * rstride + jb;
      for (int j = 0; j < w; ++j) acc[j] += av * double(br[j]);
    }
    for (int j = 0; j < w; ++j)
      out_row[jb + j] = kAccumulate ? S(double(out_row[jb + j]) + acc[j]) : S(acc[j]);
  }
}

// out = a[m,k] * b[k,n]
template <class S>
void gemm(const S* a, const S* b, S* out, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static) if (m > 1 && m * k * n > 32768)
  for (int64_t i = 0; i < m; ++i) gemm_row<S, false, true>(a + i * k, 1, b, n, k, n, out + i * n);
}

// out[m,k] += g[m,n] * b[k,n]^T, via a transposed scratch copy of b
template <class S>
void gemm_nt_acc(const S* g, const S* b, S* out, int64_t m, int64_t n, int64_t k) {
  std::vector<S> bt(size_t(n * k));
  for (int64_t j = 0; j < k; ++j)
    for (int64_t p = 0; p < n; ++p) bt[size_t(p * k + j)] = b[j * n + p];
#pragma omp parallel for schedule(static) if (m > 1 && m * k * n > 32768)
  for (int64_t i = 0; i < m; ++i) gemm_row<S, true, true>(g + i * n, 1, bt.data(), k, n, k, out + i * k);
}

// out[k,n] += a[m,k]^T * g[m,n]
template <class S>
void gemm_tn_acc(const S* a, const S* g, S* out, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static) if (k > 1 && m * k * n > 32768)
  for (int64_t i = 0; i < k; ++i) gemm_row<S, true, false>(a + i, k, g, n, m, n, out + i * n);
}

}  // namespace detail

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw std::invalid_argument("matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  auto out = TensorT<S>::zeros({m, n});
  detail::gemm(a.data(), b.data(), out.data(), m, k, n);
  check_finite(out, "matmul");

  if (detail::should_record<S>({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    active_graph<S>()->record("matmul", {a.id(), b.id()}, out.id(), [as, bs, os, m, k, n] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        if (as->grad.empty()) as->grad.assign(as->data.size(), S(0));
        detail::gemm_nt_acc(os->grad.data(), bs->data.data(), as->grad.data(), m, n, k);
      }
      if (bs->requires_grad) {
        if (bs->grad.empty()) bs->grad.assign(bs->data.size(), S(0));
        detail::gemm_tn_acc(as->data.data(), os->grad.data(), bs->grad.data(), m, k, n);
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = TensorT<S>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  check_finite(out, "add");

  if (detail::should_record<S>({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    active_graph<S>()->record("add", {a.id(), b.id()}, out.id(), [as, bs, os, n] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        if (as->grad.empty()) as->grad.assign(as->data.size(), S(0));
        for (int64_t i = 0; i < n; ++i) as->grad[size_t(i)] += os->grad[size_t(i)];
      }
      if (bs->requires_grad) {
        if (bs->grad.empty()) bs->grad.assign(bs->data.size(), S(0));
        for (int64_t i = 0; i < n; ++i) bs->grad[size_t(i)] += os->grad[size_t(i)];
      }
    });
  }
  return out;
}

// x[rows, c] + bias[c], broadcast over rows
template <class S>
TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& bias) {
  if (x.ndim() != 2 || bias.ndim() != 1 || bias.dim(0) != x.dim(1))
    throw std::invalid_argument("add_bias: incompatible shapes " + shape_str(x.shape()) + " and " +
                                shape_str(bias.shape()));
  const int64_t rows = x.dim(0), c = x.dim(1);
  auto out = TensorT<S>::zeros(x.shape());
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] + bias.data()[j];
  check_finite(out, "add_bias");

  if (detail::should_record<S>({&x, &bias})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), bs = bias.storage(), os = out.storage();
    active_graph<S>()->record("add_bias", {x.id(), bias.id()}, out.id(), [xs, bs, os, rows, c] {
      if (os->grad.empty()) return;
      if (xs->requires_grad) {
        if (xs->grad.empty()) xs->grad.assign(xs->data.size(), S(0));
        for (size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i];
      }
      if (bs->requires_grad) {
        if (bs->grad.empty()) bs->grad.assign(bs->data.size(), S(0));
        for (int64_t j = 0; j < c; ++j) {
          double acc = 0.0;
          for (int64_t i = 0; i < rows; ++i) acc += double(os->grad[size_t(i * c + j)]);
          bs->grad[size_t(j)] = S(double(bs->grad[size_t(j)]) + acc);
        }
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = TensorT<S>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  check_finite(out, "mul");

  if (detail::should_record<S>({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    active_graph<S>()->record("mul", {a.id(), b.id()}, out.id(), [as, bs, os, n] {
      if (os->grad.empty()) return;
      if (as->requires_grad) {
        if (as->grad.empty()) as->grad.assign(as->data.size(), S(0));
        for (int64_t i = 0; i < n; ++i) as->grad[size_t(i)] += os->grad[size_t(i)] * bs->data[size_t(i)];
      }
      if (bs->requires_grad) {
        if (bs->grad.empty()) bs->grad.assign(bs->data.size(), S(0));
        for (int64_t i = 0; i < n; ++i) bs->grad[size_t(i)] += os->grad[size_t(i)] * as->data[size_t(i)];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& x, S c) {
  auto out = TensorT<S>::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * c;
  if (detail::should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    active_graph<S>()->record("scale", {x.id()}, out.id(), [xs, os, c, n] {
      if (os->grad.empty() || !xs->requires_grad) return;
      if (xs->grad.empty()) xs->grad.assign(xs->data.size(), S(0));
      for (int64_t i = 0; i < n; ++i) xs->grad[size_t(i)] += os->grad[size_t(i)] * c;
    });
  }
  return out;
}

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  double acc = 0.0;
  for (const S v : x.vec()) acc += double(v);
  auto out = TensorT<S>::scalar(S(acc));
  if (detail::should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    active_graph<S>()->record("sum", {x.id()}, out.id(), [xs, os] {
      if (os->grad.empty() || !xs->requires_grad) return;
      if (xs->grad.empty()) xs->grad.assign(xs->data.size(), S(0));
      for (auto& g : xs->grad) g += os->grad[0];
    });
  }
  return out;
}

// tanh-approximation GELU
template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
  constexpr double c0 = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c1 = 0.044715;
  auto out = TensorT<S>::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double v = double(x.data()[i]);
    out.data()[i] = S(0.5 * v * (1.0 + std::tanh(c0 * (v + c1 * v * v * v))));
  }
  check_finite(out, "gelu");

  if (detail::should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    active_graph<S>()->record("gelu", {x.id()}, out.id(), [xs, os, n] {
      if (os->grad.empty() || !xs->requires_grad) return;
      if (xs->grad.empty()) xs->grad.assign(xs->data.size(), S(0));
      for (int64_t i = 0; i < n; ++i) {
        const double v = double(xs->data[size_t(i)]);
        const double u = c0 * (v + c1 * v * v * v);
        const double t = std::tanh(u);
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c0 * (1.0 + 3.0 * c1 * v * v);
        xs->grad[size_t(i)] += S(double(os->grad[size_t(i)]) * d);
      }
    });
  }
  return out;
}

// row-wise softmax over the last dimension of a 2-D tensor
template <class S>
TensorT<S> softmax(const TensorT<S>& x) {
  if (x.ndim() != 2 || x.dim(1) < 1)
    throw std::invalid_argument("softmax: expects [rows, n] with n >= 1, got " + shape_str(x.shape()));
  const int64_t rows = x.dim(0), n = x.dim(1);
  auto out = TensorT<S>::zeros(x.shape());
  for (int64_t i = 0; i < rows; ++i) {
    const S* xr = x.data() + i * n;
    S* yr = out.data() + i * n;
    double mx = double(xr[0]);
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, double(xr[j]));
    double sum = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double e = std::exp(double(xr[j]) - mx);
      yr[j] = S(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < n; ++j) yr[j] = S(double(yr[j]) * inv);
  }
  check_finite(out, "softmax");

  if (detail::should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    active_graph<S>()->record("softmax", {x.id()}, out.id(), [xs, os, rows, n] {
      if (os->grad.empty() || !xs->requires_grad) return;
      if (xs->grad.empty()) xs->grad.assign(xs->data.size(), S(0));
      for (int64_t i = 0; i < rows; ++i) {
        const S* y = os->data.data() + i * n;
        const S* gy = os->grad.data() + i * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += double(gy[j]) * double(y[j]);
        for (int64_t j = 0; j < n; ++j)
          xs->grad[size_t(i * n + j)] += S(double(y[j]) * (double(gy[j]) - dot));
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> layernorm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, double eps = 1e-5) {
  if (x.ndim() != 2) throw std::invalid_argument("layernorm: expects [rows, d], got " + shape_str(x.shape()));
  const int64_t rows = x.dim(0), d = x.dim(1);
  if (d == 0) throw std::invalid_argument("layernorm: feature dimension is zero");
  if (gamma.numel() != d || beta.numel() != d)
    throw std::invalid_argument("layernorm: gamma/beta must have length " + std::to_string(d));
  if (!(eps > 0)) throw std::invalid_argument("layernorm: eps must be positive");

  auto out = TensorT<S>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<S>>(size_t(rows * d));
  auto inv_sigma = std::make_shared<std::vector<double>>(size_t(rows));
  for (int64_t i = 0; i < rows; ++i) {
    const S* xr = x.data() + i * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += double(xr[j]);
    mean /= double(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = double(xr[j]) - mean;
      var += c * c;
    }
    var /= double(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[size_t(i)] = inv;
    for (int64_t j = 0; j < d; ++j) {
      const double h = (double(xr[j]) - mean) * inv;
      (*xhat)[size_t(i * d + j)] = S(h);
      out.data()[i * d + j] = S(h * double(gamma.data()[j]) + double(beta.data()[j]));
    }
  }
  check_finite(out, "layernorm");

  if (detail::should_record<S>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage();
    active_graph<S>()->record("layernorm", {x.id(), gamma.id(), beta.id()}, out.id(),
                              [xs, gs, bs, os, xhat, inv_sigma, rows, d] {
      if (os->grad.empty()) return;
      if (xs->requires_grad && xs->grad.empty()) xs->grad.assign(xs->data.size(), S(0));
      if (gs->requires_grad && gs->grad.empty()) gs->grad.assign(gs->data.size(), S(0));
      if (bs->requires_grad && bs->grad.empty()) bs->grad.assign(bs->data.size(), S(0));
      for (int64_t i = 0; i < rows; ++i) {
        const S* gy = os->grad.data() + i * d;
        const S* h = xhat->data() + i * d;
        if (xs->requires_grad) {
          double m1 = 0.0, m2 = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            const double dh = double(gy[j]) * double(gs->data[size_t(j)]);
            m1 += dh;
            m2 += dh * double(h[j]);
          }
          m1 /= double(d);
          m2 /= double(d);
          const double inv = (*inv_sigma)[size_t(i)];
          for (int64_t j = 0; j < d; ++j) {
            const double dh = double(gy[j]) * double(gs->data[size_t(j)]);
            xs->grad[size_t(i * d + j)] += S(inv * (dh - m1 - double(h[j]) * m2));
          }
        }
        if (gs->requires_grad)
          for (int64_t j = 0; j < d; ++j) gs->grad[size_t(j)] += S(double(gy[j]) * double(h[j]));
        if (bs->requires_grad)
          for (int64_t j = 0; j < d; ++j) bs->grad[size_t(j)] += gy[j];
      }
    });
  }
  return out;
}

// mean over rows of -log softmax(logits)[target]
template <class S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int32_t>& targets) {
  if (logits.ndim() != 2)
    throw std::invalid_argument("cross_entropy: expects [batch, vocab], got " + shape_str(logits.shape()));
  const int64_t rows = logits.dim(0), v = logits.dim(1);
  if (int64_t(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy: batch " + std::to_string(rows) + " vs " +
                                std::to_string(targets.size()) + " targets");
  for (int32_t t : targets)
    if (t < 0 || int64_t(t) >= v)
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocab of " +
                              std::to_string(v));

  auto probs = std::make_shared<std::vector<S>>(size_t(rows * v));
  double total = 0.0;
  for (int64_t i = 0; i < rows; ++i) {
    const S* xr = logits.data() + i * v;
    double mx = double(xr[0]);
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, double(xr[j]));
    double sum = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      const double e = std::exp(double(xr[j]) - mx);
      (*probs)[size_t(i * v + j)] = S(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < v; ++j) (*probs)[size_t(i * v + j)] = S(double((*probs)[size_t(i * v + j)]) * inv);
    total += (mx + std::log(sum)) - double(xr[targets[size_t(i)]]);
  }
  auto out = TensorT<S>::scalar(S(total / double(rows)));
  check_finite(out, "cross_entropy");

  if (detail::should_record<S>({&logits})) {
    out.set_requires_grad(true);
    auto ls = logits.storage(), os = out.storage();
    auto tgt = targets;  // copy into the closure
    active_graph<S>()->record("cross_entropy", {logits.id()}, out.id(), [ls, os, probs, tgt, rows, v] {
      if (os->grad.empty() || !ls->requires_grad) return;
      if (ls->grad.empty()) ls->grad.assign(ls->data.size(), S(0));
      const double g = double(os->grad[0]) / double(rows);
      for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < v; ++j) {
          double p = double((*probs)[size_t(i * v + j)]);
          if (j == int64_t(tgt[size_t(i)])) p -= 1.0;
          ls->grad[size_t(i * v + j)] += S(g * p);
        }
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> embedding_lookup(const TensorT<S>& table, const std::vector<int32_t>& ids) {
  if (table.ndim() != 2)
    throw std::invalid_argument("embedding_lookup: table must be [vocab, dim], got " + shape_str(table.shape()));
  const int64_t v = table.dim(0), d = table.dim(1);
  for (int32_t id : ids)
    if (id < 0 || int64_t(id) >= v)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                              std::to_string(v));
  const int64_t rows = int64_t(ids.size());
  auto out = TensorT<S>::zeros({rows, d});
  for (int64_t i = 0; i < rows; ++i)
    std::copy_n(table.data() + int64_t(ids[size_t(i)]) * d, d, out.data() + i * d);

  if (detail::should_record<S>({&table})) {
    out.set_requires_grad(true);
    auto ts = table.storage(), os = out.storage();
    auto idc = ids;
    active_graph<S>()->record("embedding_lookup", {table.id()}, out.id(), [ts, os, idc, d] {
      if (os->grad.empty() || !ts->requires_grad) return;
      if (ts->grad.empty()) ts->grad.assign(ts->data.size(), S(0));
      for (size_t i = 0; i < idc.size(); ++i) {
        S* dst = ts->grad.data() + int64_t(idc[i]) * d;
        const S* src = os->grad.data() + int64_t(i) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// Inverted dropout; a no-op when p == 0. Mask consumption is deterministic
// given the rng state.
template <class S>
TensorT<S> dropout(const TensorT<S>& x, double p, Pcg64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (p == 0.0) return x;
  const int64_t n = x.numel();
  auto mask = std::make_shared<std::vector<uint8_t>>(size_t(n));
  const double keep = 1.0 - p;
  const S inv = S(1.0 / keep);
  auto out = TensorT<S>::zeros(x.shape());
  for (int64_t i = 0; i < n; ++i) {
    const bool k = rng.next_double() >= p;
    (*mask)[size_t(i)] = k;
    out.data()[i] = k ? x.data()[i] * inv : S(0);
  }

  if (detail::should_record<S>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    active_graph<S>()->record("dropout", {x.id()}, out.id(), [xs, os, mask, inv, n] {
      if (os->grad.empty() || !xs->requires_grad) return;
      if (xs->grad.empty()) xs->grad.assign(xs->data.size(), S(0));
      for (int64_t i = 0; i < n; ++i)
        if ((*mask)[size_t(i)]) xs->grad[size_t(i)] += os->grad[size_t(i)] * inv;
    });
  }
  return out;
}

// Fused multi-head causal self-attention over a packed qkv projection.
// qkv rows are tokens (b * T + t); columns are [q | k | v], each d wide with
// head h occupying the slice [h*hd, (h+1)*hd). Position t attends to <= t.
template <class S>
TensorT<S> causal_attention(const TensorT<S>& qkv, int64_t batch, int64_t seq, int64_t n_head) {
  if (qkv.ndim() != 2 || qkv.dim(0) != batch * seq || qkv.dim(1) % 3 != 0)
    throw std::invalid_argument("causal_attention: bad qkv shape " + shape_str(qkv.shape()));
  const int64_t d = qkv.dim(1) / 3;
  if (d % n_head != 0) throw std::invalid_argument("causal_attention: n_embd not divisible by n_head");
  const int64_t hd = d / n_head;
  const double inv_sqrt = 1.0 / std::sqrt(double(hd));
  const int64_t c3 = 3 * d;

  auto out = TensorT<S>::zeros({batch * seq, d});
  auto probs = std::make_shared<std::vector<S>>(size_t(batch * n_head * seq * seq), S(0));

  const S* in = qkv.data();
  S* op = out.data();
  S* pp = probs->data();
#pragma omp parallel for schedule(static)
  for (int64_t bh = 0; bh < batch * n_head; ++bh) {
    const int64_t b = bh / n_head, h = bh % n_head;
    const S* base = in + b * seq * c3;
    const int64_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
    S* prow = pp + bh * seq * seq;
    std::vector<double> scores(static_cast<size_t>(seq));
    for (int64_t t = 0; t < seq; ++t) {
      const S* q = base + t * c3 + qo;
      double mx = -1e300;
      for (int64_t j = 0; j <= t; ++j) {
        const S* kk = base + j * c3 + ko;
        double acc = 0.0;
        for (int64_t c = 0; c < hd; ++c) acc += double(q[c]) * double(kk[c]);
        acc *= inv_sqrt;
        scores[size_t(j)] = acc;
        mx = std::max(mx, acc);
      }
      double sum = 0.0;
      for (int64_t j = 0; j <= t; ++j) {
        const double e = std::exp(scores[size_t(j)] - mx);
        scores[size_t(j)] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      S* pr = prow + t * seq;
      for (int64_t j = 0; j <= t; ++j) pr[j] = S(scores[size_t(j)] * inv);
      S* orow = op + (b * seq + t) * d + h * hd;
      for (int64_t c = 0; c < hd; ++c) {
        double acc = 0.0;
        for (int64_t j = 0; j <= t; ++j) acc += double(pr[j]) * double(base[j * c3 + vo + c]);
        orow[c] = S(acc);
      }
    }
  }
  check_finite(out, "causal_attention");

  if (detail::should_record<S>({&qkv})) {
    out.set_requires_grad(true);
    auto xs = qkv.storage(), os = out.storage();
    active_graph<S>()->record("causal_attention", {qkv.id()}, out.id(),
                              [xs, os, probs, batch, seq, n_head, d, hd, c3, inv_sqrt] {
      if (os->grad.empty() || !xs->requires_grad) return;
      if (xs->grad.empty()) xs->grad.assign(xs->data.size(), S(0));
      const S* in = xs->data.data();
      const S* gy = os->grad.data();
      S* gx = xs->grad.data();
      const S* pp = probs->data();
      // each (b, h) writes a disjoint column slice of gx, so rows are independent
#pragma omp parallel for schedule(static)
      for (int64_t bh = 0; bh < batch * n_head; ++bh) {
        const int64_t b = bh / n_head, h = bh % n_head;
        const S* base = in + b * seq * c3;
        S* gbase = gx + b * seq * c3;
        const int64_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
        const S* prow = pp + bh * seq * seq;
        std::vector<double> dp(static_cast<size_t>(seq));
        for (int64_t t = 0; t < seq; ++t) {
          const S* g = gy + (b * seq + t) * d + h * hd;
          const S* pr = prow + t * seq;
          // dV and dP
          for (int64_t j = 0; j <= t; ++j) {
            const S* vv = base + j * c3 + vo;
            double acc = 0.0;
            for (int64_t c = 0; c < hd; ++c) acc += double(g[c]) * double(vv[c]);
            dp[size_t(j)] = acc;
            S* gv = gbase + j * c3 + vo;
            const double pj = double(pr[j]);
            for (int64_t c = 0; c < hd; ++c) gv[c] = S(double(gv[c]) + pj * double(g[c]));
          }
          // softmax backward, then dQ and dK with the 1/sqrt(hd) factor
          double dot = 0.0;
          for (int64_t j = 0; j <= t; ++j) dot += dp[size_t(j)] * double(pr[j]);
          S* gq = gbase + t * c3 + qo;
          for (int64_t j = 0; j <= t; ++j) {
            const double ds = double(pr[j]) * (dp[size_t(j)] - dot) * inv_sqrt;
            if (ds == 0.0) continue;
            const S* kk = base + j * c3 + ko;
            S* gk = gbase + j * c3 + ko;
            const S* q = base + t * c3 + qo;
            for (int64_t c = 0; c < hd; ++c) {
              gq[c] = S(double(gq[c]) + ds * double(kk[c]));
              gk[c] = S(double(gk[c]) + ds * double(q[c]));
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace potq
