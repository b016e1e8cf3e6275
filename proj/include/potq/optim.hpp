#pragma once

// AdamW with bias correction and decoupled weight decay.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "potq/tensor.hpp"

namespace potq {

template <class S>
struct AdamWStateT {
  std::vector<S> m;
  std::vector<S> v;
  int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

using AdamWState = AdamWStateT<float>;

// Missing grad is treated as zero (weight decay still applies).
template <class S>
void adamw_step(TensorT<S>& param, AdamWStateT<S>& st, double lr) {
  if (!(lr > 0)) throw std::invalid_argument("adamw: lr must be positive");
  const size_t n = size_t(param.numel());
  if (st.m.empty()) st.m.assign(n, S(0));
  if (st.v.empty()) st.v.assign(n, S(0));
  if (st.m.size() != n || st.v.size() != n)
    throw std::logic_error("adamw: moment buffers do not match parameter length");

  const std::vector<S>& g = param.storage()->grad;
  if (!g.empty() && g.size() != n) throw std::logic_error("adamw: grad length mismatch");
  for (size_t i = 0; i < g.size(); ++i)
    if (!std::isfinite(double(g[i])))
      throw std::runtime_error("adamw: non-finite gradient at index " + std::to_string(i));

  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, double(st.step));
  S* p = param.data();
  for (size_t i = 0; i < n; ++i) {
    const double gi = g.empty() ? 0.0 : double(g[i]);
    const double m = st.beta1 * double(st.m[i]) + (1.0 - st.beta1) * gi;
    const double v = st.beta2 * double(st.v[i]) + (1.0 - st.beta2) * gi * gi;
    st.m[i] = S(m);
    st.v[i] = S(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    p[i] = S(double(p[i]) - lr * (mhat / (std::sqrt(vhat) + st.eps) + st.weight_decay * double(p[i])));
  }
}

// Parameter-group convenience wrapper used by the training loops.
template <class S>
class AdamWT {
 public:
  void add(TensorT<S> param, double weight_decay) {
    Slot s;
    s.param = std::move(param);
    s.state.weight_decay = weight_decay;
    slots_.push_back(std::move(s));
  }

  void step(double lr) {
    for (auto& s : slots_) adamw_step(s.param, s.state, lr);
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  size_t size() const { return slots_.size(); }

 private:
  struct Slot {
    TensorT<S> param;
    AdamWStateT<S> state;
  };
  std::vector<Slot> slots_;
};

using AdamW = AdamWT<float>;

}  // namespace potq
