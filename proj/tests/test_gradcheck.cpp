#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "potq/ops.hpp"
#include "potq/rng.hpp"
#include "potq/tensor.hpp"

// Finite-difference gradient checks in double precision: central differences
// with h = 1e-4 against the recorded backward, relative error < 1e-5.

using namespace potq;

using DTensor = TensorT<double>;
using DGraph = GraphT<double>;
using DScope = TapeScopeT<double>;

namespace {

constexpr double kH = 1e-4;
constexpr double kTol = 1e-5;

double rel_err(double a, double b) {
  const double scale = std::max({1.0, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) / scale;
}

DTensor random_tensor(Shape shape, Pcg64& rng, bool requires_grad = true, double spread = 1.0) {
  auto t = DTensor::zeros(std::move(shape), requires_grad);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.next_normal() * spread;
  return t;
}

// Checks d(loss)/d(param) for every element of every listed parameter. The
// loss function must be a pure function of the parameter values.
void gradcheck(const std::function<DTensor()>& loss_fn, std::vector<DTensor> params, const char* what) {
  DGraph g;
  {
    DScope scope(g);
    auto loss = loss_fn();
    g.backward(loss);
  }
  for (auto& p : params) {
    REQUIRE_MESSAGE(p.has_grad(), what);
    const auto analytic = p.grad();
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double keep = p.data()[i];
      p.data()[i] = keep + kH;
      const double up = loss_fn().item();
      p.data()[i] = keep - kH;
      const double down = loss_fn().item();
      p.data()[i] = keep;
      const double numeric = (up - down) / (2.0 * kH);
      INFO(what, " param element ", i, ": analytic ", analytic[size_t(i)], " numeric ", numeric);
      CHECK(rel_err(analytic[size_t(i)], numeric) < kTol);
    }
  }
}

// Deterministic scalarizer: every output element gets a distinct fixed
// weight, and repeated calls with the same shape see identical weights so
// the loss stays a pure function of the op inputs.
DTensor scalarize(const DTensor& y) {
  Pcg64 wrng(0xC0FFEE);
  auto w = DTensor::zeros(y.shape());
  for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = wrng.next_normal();
  return sum(mul(y, w));
}

}  // namespace

TEST_CASE("gradcheck: matmul") {
  Pcg64 rng(101);
  for (int trial = 0; trial < 12; ++trial) {
    const int m = 1 + int(rng.next_below(4)), k = 1 + int(rng.next_below(4)), n = 1 + int(rng.next_below(4));
    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    gradcheck([&] { return scalarize(matmul(a, b)); }, {a, b}, "matmul");
  }
}

TEST_CASE("gradcheck: add, add_bias, mul, scale") {
  Pcg64 rng(102);
  for (int trial = 0; trial < 8; ++trial) {
    const int r = 1 + int(rng.next_below(3)), c = 1 + int(rng.next_below(5));
    auto a = random_tensor({r, c}, rng);
    auto b = random_tensor({r, c}, rng);
    auto bias = random_tensor({c}, rng);
    gradcheck([&] { return scalarize(add(a, b)); }, {a, b}, "add");
    gradcheck([&] { return scalarize(add_bias(a, bias)); }, {a, bias}, "add_bias");
    gradcheck([&] { return scalarize(mul(a, b)); }, {a, b}, "mul");
    gradcheck([&] { return scalarize(scale(a, 2.5)); }, {a}, "scale");
  }
}

TEST_CASE("gradcheck: gelu") {
  Pcg64 rng(103);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor({2, 5}, rng, true, 2.0);
    gradcheck([&] { return scalarize(gelu(x)); }, {x}, "gelu");
  }
}

TEST_CASE("gradcheck: softmax") {
  Pcg64 rng(104);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 2 + int(rng.next_below(6));
    auto x = random_tensor({2, n}, rng);
    gradcheck([&] { return scalarize(softmax(x)); }, {x}, "softmax");
  }
}

TEST_CASE("gradcheck: layernorm") {
  Pcg64 rng(105);
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 2 + int(rng.next_below(6));
    auto x = random_tensor({3, d}, rng);
    auto gamma = random_tensor({d}, rng);
    auto beta = random_tensor({d}, rng);
    gradcheck([&] { return scalarize(layernorm(x, gamma, beta)); }, {x, gamma, beta}, "layernorm");
  }
}

TEST_CASE("gradcheck: cross_entropy") {
  Pcg64 rng(106);
  for (int trial = 0; trial < 10; ++trial) {
    const int v = 2 + int(rng.next_below(8)), b = 1 + int(rng.next_below(4));
    auto logits = random_tensor({b, v}, rng, true, 2.0);
    std::vector<int32_t> targets(size_t(b));
    for (auto& t : targets) t = int32_t(rng.next_below(uint64_t(v)));
    gradcheck([&] { return cross_entropy(logits, targets); }, {logits}, "cross_entropy");
  }
}

TEST_CASE("gradcheck: embedding_lookup accumulates over repeated ids") {
  Pcg64 rng(107);
  for (int trial = 0; trial < 8; ++trial) {
    auto table = random_tensor({4, 3}, rng);
    const std::vector<int32_t> ids = {1, 0, 1, 3, 1};  // id 1 repeats
    gradcheck([&] { return scalarize(embedding_lookup(table, ids)); }, {table}, "embedding_lookup");
  }

  // repeated id accumulates exactly twice the single-row gradient
  auto table = DTensor::from_data({2, 2}, {1, 2, 3, 4}, true);
  DGraph g;
  {
    DScope scope(g);
    g.backward(sum(embedding_lookup(table, {1, 1})));
  }
  CHECK(table.grad()[2] == doctest::Approx(2.0));
  CHECK(table.grad()[3] == doctest::Approx(2.0));
  CHECK(table.grad()[0] == doctest::Approx(0.0));
}

TEST_CASE("gradcheck: causal attention") {
  Pcg64 rng(108);
  for (int trial = 0; trial < 6; ++trial) {
    const int64_t batch = 1 + int64_t(rng.next_below(2));
    const int64_t seq = 2 + int64_t(rng.next_below(3));
    const int64_t n_head = 1 + int64_t(rng.next_below(2));
    const int64_t d = n_head * (2 + int64_t(rng.next_below(2)));
    auto qkv = random_tensor({batch * seq, 3 * d}, rng);
    gradcheck([&] { return scalarize(causal_attention(qkv, batch, seq, n_head)); }, {qkv},
              "causal_attention");
  }
}

TEST_CASE("gradcheck: dropout with a replayed mask") {
  Pcg64 rng(109);
  for (int trial = 0; trial < 6; ++trial) {
    auto x = random_tensor({2, 6}, rng);
    const uint64_t mask_seed = rng.next_u64();
    gradcheck(
        [&] {
          Pcg64 mask_rng(mask_seed);  // same mask on every evaluation
          return scalarize(dropout(x, 0.3, mask_rng));
        },
        {x}, "dropout");
  }
}

TEST_CASE("gradcheck: matmul chain end to end") {
  Pcg64 rng(110);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({3, 4}, rng);
    auto w1 = random_tensor({4, 5}, rng);
    auto w2 = random_tensor({5, 2}, rng);
    gradcheck([&] { return scalarize(matmul(gelu(matmul(x, w1)), w2)); }, {x, w1, w2}, "chain");
  }
}
