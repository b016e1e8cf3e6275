#include <doctest.h>

#include <cmath>

#include "potq/optim.hpp"
#include "potq/tensor.hpp"

using namespace potq;

TEST_CASE("adamw: zero grad and zero weight decay leave params unchanged") {
  auto p = Tensor::from_data({3}, {1, -2, 3}, true);
  AdamWState st;
  adamw_step(p, st, 0.1);
  CHECK(p.vec() == std::vector<float>{1, -2, 3});
  CHECK(st.step == 1);
}

TEST_CASE("adamw: first step with unit grad is a bias-corrected lr-sized step") {
  // m = 0.1, v = 0.05 -> mhat = 1, vhat = 1 -> delta = -lr / (1 + eps)
  auto p = Tensor::from_data({1}, {0.5f}, true);
  p.grad()[0] = 1.0f;
  AdamWState st;
  adamw_step(p, st, 0.1);
  CHECK(p.data()[0] == doctest::Approx(0.5 - 0.09999999900000002).epsilon(1e-7));
}

TEST_CASE("adamw: weight decay with zero grad is a pure multiplicative shrink") {
  auto p = Tensor::from_data({2}, {4, -4}, true);
  AdamWState st;
  st.weight_decay = 0.1;
  adamw_step(p, st, 0.5);
  CHECK(p.data()[0] == doctest::Approx(4.0 * (1.0 - 0.5 * 0.1)));
  CHECK(p.data()[1] == doctest::Approx(-4.0 * (1.0 - 0.5 * 0.1)));
}

TEST_CASE("adamw: NaN gradients abort with a diagnostic") {
  auto p = Tensor::from_data({2}, {1, 2}, true);
  p.grad()[1] = std::numeric_limits<float>::quiet_NaN();
  AdamWState st;
  CHECK_THROWS_WITH_AS(adamw_step(p, st, 0.1), doctest::Contains("non-finite gradient"), std::runtime_error);
}

TEST_CASE("adamw: step counter increases and moments persist") {
  auto p = Tensor::from_data({1}, {1.0f}, true);
  AdamWState st;
  for (int i = 1; i <= 5; ++i) {
    p.grad()[0] = 0.5f;
    adamw_step(p, st, 0.01);
    CHECK(st.step == i);
  }
  CHECK(st.m[0] > 0.0f);
  CHECK(st.v[0] > 0.0f);
  CHECK(p.data()[0] < 1.0f);
}

TEST_CASE("adamw: a few steps descend a quadratic") {
  auto p = Tensor::from_data({1}, {3.0f}, true);
  AdamWState st;
  for (int i = 0; i < 200; ++i) {
    p.grad()[0] = 2.0f * p.data()[0];  // d/dp of p^2
    adamw_step(p, st, 0.05);
  }
  CHECK(std::fabs(p.data()[0]) < 0.5f);
}
