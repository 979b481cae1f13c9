#include "semtok/random.hpp"
#include "semtok/tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>

using namespace semtok;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Weighted sum with fixed random weights, so that gradients are not all ones.
Tensor probe(const Tensor& y, std::uint64_t seed = 7) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (double& x : w) x = 2.0 * rng.uniform() - 1.0;
  return sum(mul(y, Tensor::from(y.shape(), std::move(w))));
}

void expect_gradients(const std::function<Tensor()>& f, std::vector<Tensor> params, double tol = 1e-5) {
  const GradCheckReport r = grad_check(f, params, 1e-6, tol);
  INFO("max rel error " << r.max_rel_error << " at " << r.worst);
  CHECK(r.passed);
}

}  // namespace

TEST_CASE("matmul of identities is the identity") {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor out = matmul(eye, eye);
  CHECK(out.shape() == Shape{2, 2});
  CHECK(std::vector<double>(out.data().begin(), out.data().end()) == std::vector<double>{1, 0, 0, 1});
}

TEST_CASE("matmul by hand") {
  const Tensor out = matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {1, 1}));
  CHECK(out.shape() == Shape{2, 1});
  CHECK(out.at({0, 0}) == 3.0);
  CHECK(out.at({1, 0}) == 7.0);
}

TEST_CASE("matmul gradient of sum equals ones times b transposed") {
  Rng rng(11);
  Tensor a = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {4, 2}).detach();
  sum(matmul(a, b)).backward();
  // Central differences, step 1e-6, computed here without grad_check.
  const double h = 1e-6;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      double expected = 0.0;
      for (std::size_t j = 0; j < 2; ++j) expected += b.at({k, j});
      Tensor plus = a.detach(), minus = a.detach();
      plus.mutable_data()[i * 4 + k] += h;
      minus.mutable_data()[i * 4 + k] -= h;
      const double fd = (sum(matmul(plus, b)).item() - sum(matmul(minus, b)).item()) / (2 * h);
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(expected).epsilon(1e-12));
      CHECK(fd == doctest::Approx(expected).epsilon(1e-8));
    }
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax of equal logits is uniform") {
  const Tensor p = softmax_lastdim(Tensor::from({3}, {0, 0, 0}));
  for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax is stable for large logits") {
  const Tensor p = softmax_lastdim(Tensor::from({2}, {1000, 0}));
  CHECK(std::abs(p.data()[0] - 1.0) < 1e-12);
  CHECK(std::abs(p.data()[1]) < 1e-12);
}

TEST_CASE("masked softmax equals softmax of the unmasked prefix") {
  const Mask mask = Mask::from({3}, {1, 1, 0});
  const Tensor p = softmax_lastdim(Tensor::from({3}, {1, 2, 3}), &mask);
  const double z = std::exp(1.0) + std::exp(2.0);
  CHECK(p.data()[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-14));
  CHECK(p.data()[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-14));
  CHECK(p.data()[2] == 0.0);
}

TEST_CASE("softmax rows sum to one and masked entries are exactly zero") {
  Rng rng(3);
  const Tensor x = random_tensor(rng, {2, 3, 5}, -20, 20);
  std::vector<std::uint8_t> m(2 * 5);
  for (auto& v : m) v = rng.below(3) != 0;
  m[0] = m[5] = 1;
  const Mask mask = Mask::from({2, 1, 5}, m);
  const Tensor p = softmax_lastdim(x, &mask);
  for (std::size_t r = 0; r < 6; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      const double v = p.data()[r * 5 + j];
      if (!m[(r / 3) * 5 + j]) CHECK(v == 0.0);
      total += v;
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("fully masked softmax row is rejected") {
  const Mask mask = Mask::from({2}, {0, 0});
  CHECK_THROWS_AS(softmax_lastdim(Tensor::from({2}, {1, 2}), &mask), std::domain_error);
}

TEST_CASE("elementwise examples") {
  const Tensor c = cumsum_lastdim(Tensor::from({4}, {1, 1, 1, 1}));
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{1, 2, 3, 4});

  const Tensor n = layer_norm(Tensor::from({1, 4}, {3, 3, 3, 3}));
  for (double v : n.data()) CHECK(v == 0.0);

  const Tensor r = relu(Tensor::from({3}, {-1, 0, 2}));
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{0, 0, 2});
}

TEST_CASE("cumsum differences reproduce the input exactly") {
  Rng rng(5);
  const Tensor x = random_tensor(rng, {3, 9});
  const Tensor c = cumsum_lastdim(x);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(c.data()[r * 9] == x.data()[r * 9]);
    for (std::size_t i = 1; i < 9; ++i) {
      // Prefix sums accumulate left to right, so the difference is exact
      // whenever the sum is representable; compare against that sum.
      CHECK(c.data()[r * 9 + i] == c.data()[r * 9 + i - 1] + x.data()[r * 9 + i]);
    }
  }
}

TEST_CASE("broadcasting add and shape errors") {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({1, 3}, {10, 20, 30});
  const Tensor c = add(a, b);
  CHECK(c.at({1, 2}) == 36.0);
  CHECK_THROWS_AS(add(a, Tensor::zeros({2, 2})), DimensionError);
  CHECK_THROWS_AS(concat({a, Tensor::zeros({2, 2})}, 0), DimensionError);
  CHECK_THROWS_AS(slice(a, 1, 2, 5), DimensionError);
  CHECK_THROWS_AS(reshape(a, {4}), DimensionError);
}

TEST_CASE("grad_check on a sum of squares") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  std::vector<Tensor> params{x};
  const GradCheckReport r = grad_check([&] { return sum(mul(x, x)); }, params, 1e-6, 1e-8);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-8);
  sum(mul(x, x)).backward();
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("reverse-mode gradients match central differences for every op") {
  Rng rng(2024);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {3, 4});
  Tensor row = random_tensor(rng, {1, 4});
  Tensor m = random_tensor(rng, {4, 2});
  Tensor pos = random_tensor(rng, {3, 4}, 0.5, 2.0);
  Tensor batch_a = random_tensor(rng, {2, 3, 4});
  Tensor batch_b = random_tensor(rng, {2, 4, 3});
  Tensor batch_c = random_tensor(rng, {2, 3, 4});
  Tensor table = random_tensor(rng, {5, 4});
  // Keep relu inputs away from the kink.
  Tensor away = random_tensor(rng, {3, 4});
  for (double& v : away.mutable_data()) v = v < 0 ? v - 0.1 : v + 0.1;

  SUBCASE("matmul") { expect_gradients([&] { return probe(matmul(a, m)); }, {a, m}); }
  SUBCASE("bmm") { expect_gradients([&] { return probe(bmm(batch_a, batch_b)); }, {batch_a, batch_b}); }
  SUBCASE("bmm transposed") {
    expect_gradients([&] { return probe(bmm(batch_a, batch_c, true)); }, {batch_a, batch_c});
  }
  SUBCASE("add with broadcast") { expect_gradients([&] { return probe(add(a, row)); }, {a, row}); }
  SUBCASE("sub") { expect_gradients([&] { return probe(sub(a, b)); }, {a, b}); }
  SUBCASE("mul with broadcast") { expect_gradients([&] { return probe(mul(a, row)); }, {a, row}); }
  SUBCASE("scale") { expect_gradients([&] { return probe(scale(a, -1.7)); }, {a}); }
  SUBCASE("exp") { expect_gradients([&] { return probe(exp(a)); }, {a}); }
  SUBCASE("ln") { expect_gradients([&] { return probe(ln(pos)); }, {pos}); }
  SUBCASE("relu") { expect_gradients([&] { return probe(relu(away)); }, {away}); }
  SUBCASE("clamp_max") { expect_gradients([&] { return probe(clamp_max(away, 0.0)); }, {away}); }
  SUBCASE("sum and mean") {
    expect_gradients([&] { return add(sum(mul(a, a)), mean(mul(b, a))); }, {a, b});
  }
  SUBCASE("layer_norm") { expect_gradients([&] { return probe(layer_norm(a)); }, {a}); }
  SUBCASE("cumsum") { expect_gradients([&] { return probe(cumsum_lastdim(a)); }, {a}); }
  SUBCASE("normalize_rows") { expect_gradients([&] { return probe(normalize_rows(a)); }, {a}); }
  SUBCASE("softmax") { expect_gradients([&] { return probe(softmax_lastdim(a)); }, {a}); }
  SUBCASE("masked softmax") {
    const Mask mask = Mask::from({3, 4}, {1, 0, 1, 1, 1, 1, 0, 0, 0, 1, 1, 1});
    expect_gradients([&] { return probe(softmax_lastdim(a, &mask)); }, {a});
  }
  SUBCASE("log_softmax") { expect_gradients([&] { return probe(log_softmax_lastdim(a)); }, {a}); }
  SUBCASE("concat") {
    expect_gradients([&] { return probe(concat({a, b}, 1)); }, {a, b});
    expect_gradients([&] { return probe(concat({a, row}, 0)); }, {a, row});
  }
  SUBCASE("slice") { expect_gradients([&] { return probe(slice(batch_a, 1, 1, 3)); }, {batch_a}); }
  SUBCASE("transpose") { expect_gradients([&] { return probe(transpose(a)); }, {a}); }
  SUBCASE("reshape and permute") {
    expect_gradients([&] { return probe(permute(reshape(batch_a, {2, 3, 2, 2}), {0, 2, 1, 3})); }, {batch_a});
  }
  SUBCASE("diagonal") {
    Tensor sq = random_tensor(rng, {3, 3});
    expect_gradients([&] { return probe(diagonal(sq)); }, {sq});
  }
  SUBCASE("embedding") {
    const std::vector<std::size_t> ids{4, 0, 4, 2};
    expect_gradients([&] { return probe(embedding(table, ids)); }, {table});
  }
  SUBCASE("select_rows") {
    const std::vector<std::size_t> rows{2, 0, 2};
    expect_gradients([&] { return probe(select_rows(a, rows)); }, {a});
  }
  SUBCASE("take_nonzero") {
    Tensor w = random_tensor(rng, {5});
    const std::vector<std::uint8_t> index{0, 1, 4, 4, 0, 3};
    expect_gradients([&] { return probe(take_nonzero(w, index, {2, 3})); }, {w});
  }
}

TEST_CASE("backward visits shared subexpressions once per use") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  const Tensor y = mul(x, x);
  add(y, y).backward();  // d/dx 2x^2 = 4x
  CHECK(x.grad()[0] == 12.0);
}

TEST_CASE("detached tensors carry no history") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  const Tensor y = scale(x, 2.0).detach();
  CHECK_FALSE(y.requires_grad());
}
