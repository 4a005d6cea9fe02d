#include <doctest.h>

#include <cmath>

#include "raglab/error.h"
#include "raglab/random.h"
#include "raglab/tensor.h"
#include "support.h"

using namespace raglab;
using raglab::testing::rel_err;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, bool grad = false) {
  std::vector<Real> v(r * c);
  for (auto& x : v) x = static_cast<Real>(rng.normal());
  Tensor t = Tensor::matrix(r, c, v);
  t.set_requires_grad(grad);
  return t;
}

// Central differences of a scalar function of one leaf tensor.
template <typename F>
std::vector<double> numeric_grad(Tensor& x, F f, double h = 1e-5) {
  std::vector<double> g(x.size());
  auto d = x.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Real keep = d[i];
    d[i] = keep + h;
    const double plus = f();
    d[i] = keep - h;
    const double minus = f();
    d[i] = keep;
    g[i] = (plus - minus) / (2 * h);
  }
  return g;
}

}  // namespace

TEST_CASE("matmul hand examples and shape errors") {
  const Tensor id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor b = Tensor::matrix(2, 2, {3, 4, 5, 6});
  const Tensor p = matmul(id, b);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.data()[i] == b.data()[i]);
  CHECK(matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4})).item() == 11);
  CHECK_THROWS_AS(matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(1, 2, {3, 4})), DimensionError);
}

TEST_CASE("matmul gradient of sum(a x b) equals ones x b^T") {
  Rng rng(3);
  Tensor a = random_matrix(rng, 3, 4, true);
  Tensor b = random_matrix(rng, 4, 2, true);
  backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      const double expect = double(b.at(k, 0)) + double(b.at(k, 1));
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  auto f = [&] {
    NoGradGuard g;
    return double(sum(matmul(a, b)).item());
  };
  const auto num = numeric_grad(a, f);
  for (std::size_t i = 0; i < num.size(); ++i) CHECK(rel_err(num[i], a.grad()[i]) <= 1e-6);
}

TEST_CASE("identity product is exact") {
  Rng rng(4);
  const Tensor x = random_matrix(rng, 5, 5);
  std::vector<Real> idv(25, 0);
  for (int i = 0; i < 5; ++i) idv[i * 6] = 1;
  const Tensor y = matmul(Tensor::matrix(5, 5, idv), x);
  CHECK(raglab::testing::max_abs_diff(x, y) <= 1e-12);
}

TEST_CASE("softmax_masked hand examples and fully masked rows") {
  const Real ninf = -INFINITY;
  auto s = softmax_masked(Tensor::matrix(1, 2, {0, 0}), Tensor::matrix(1, 2, {0, 0}));
  CHECK(s.data()[0] == doctest::Approx(0.5));
  s = softmax_masked(Tensor::matrix(1, 2, {7, -3}), Tensor::matrix(1, 2, {0, ninf}));
  CHECK(s.data()[0] == 1);
  CHECK(s.data()[1] == 0);
  s = softmax_masked(Tensor::matrix(1, 3, {1, 2, 3}), Tensor::matrix(1, 3, {0, 0, 0}));
  CHECK(s.data()[0] == doctest::Approx(0.0900).epsilon(1e-3));
  CHECK(s.data()[1] == doctest::Approx(0.2447).epsilon(1e-3));
  CHECK(s.data()[2] == doctest::Approx(0.6652).epsilon(1e-3));
  s = softmax_masked(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 2, {ninf, ninf, 0, 0}));
  CHECK(s.data()[0] == 0);
  CHECK(s.data()[1] == 0);
  CHECK(std::isfinite(double(s.data()[2])));
}

TEST_CASE("softmax rows sum to one over unmasked entries") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    const Tensor x = random_matrix(rng, n, n);
    std::vector<Real> m(n * n, 0);
    for (auto& v : m) {
      if (rng.uniform() < 0.3) v = -INFINITY;
    }
    for (std::size_t r = 0; r < n; ++r) m[r * n + rng.below(n)] = 0;
    const Tensor s = softmax_masked(x, Tensor::matrix(n, n, m));
    for (std::size_t r = 0; r < n; ++r) {
      double t = 0;
      for (std::size_t c = 0; c < n; ++c) t += s.at(r, c);
      CHECK(std::abs(t - 1) <= 1e-9);
    }
  }
}

TEST_CASE("layernorm hand examples and statistics") {
  const Tensor ones = Tensor::matrix(1, 4, {1, 1, 1, 1});
  const Tensor g4 = Tensor::matrix(1, 4, {1, 1, 1, 1}), b4 = Tensor::matrix(1, 4, {0, 0, 0, 0});
  const Tensor y = layernorm(ones, g4, b4, 1e-5);
  for (auto v : y.data()) CHECK(v == 0);
  const Tensor y2 = layernorm(Tensor::matrix(1, 2, {-1, 1}), Tensor::matrix(1, 2, {1, 1}),
                              Tensor::matrix(1, 2, {0, 0}), 1e-12);
  CHECK(y2.data()[0] == doctest::Approx(-1).epsilon(1e-9));
  CHECK(y2.data()[1] == doctest::Approx(1).epsilon(1e-9));

  Rng rng(6);
  const std::size_t D = 8, N = 1000;
  const Tensor x = random_matrix(rng, N, D);
  const Tensor gain = random_matrix(rng, 1, D), bias = random_matrix(rng, 1, D);
  const Tensor out = layernorm(x, gain, bias, 1e-9);
  double bias_mean = 0;
  for (std::size_t j = 0; j < D; ++j) bias_mean += bias.data()[j] / D;
  double mean_all = 0;
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < D; ++j) mean_all += out.at(i, j);
  }
  mean_all /= double(N * D);
  CHECK(mean_all == doctest::Approx(bias_mean).epsilon(0.05).scale(1));
  // Per position, Σ_j ((y_j - b_j)/g_j)² / D = 1 exactly up to eps.
  for (std::size_t i = 0; i < 10; ++i) {
    double v = 0;
    for (std::size_t j = 0; j < D; ++j) {
      const double z = (out.at(i, j) - bias.data()[j]) / gain.data()[j];
      v += z * z / D;
    }
    CHECK(v == doctest::Approx(1).epsilon(1e-6));
  }
}

TEST_CASE("act_fn values, sign property and unknown kinds") {
  CHECK(activate(0, Activation::silu) == 0);
  CHECK(activate(-2, Activation::relu) == 0);
  CHECK(activate(1, Activation::silu) == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK_THROWS_AS(parse_activation("gelu"), ConfigError);
  Rng rng(7);
  for (auto kind : {Activation::silu, Activation::relu}) {
    CHECK(activate(0, kind) == 0);
    for (int i = 0; i < 2000; ++i) {
      const double x = rng.normal() * std::pow(10.0, double(rng.below(7)) - 3);
      if (x == 0) continue;
      CHECK((activate(static_cast<Real>(x), kind) > 0) == (x > 0));
    }
  }
}

TEST_CASE("cross_entropy uniform, dominant, brute force and empty mask") {
  CHECK(cross_entropy(Tensor::matrix(1, 4, {0, 0, 0, 0}), std::vector<std::int32_t>{2}, {true}).item() ==
        doctest::Approx(std::log(4.0)));
  CHECK(cross_entropy(Tensor::matrix(1, 3, {0, 60, 0}), std::vector<std::int32_t>{1}, {true}).item() <
        1e-20);
  Rng rng(8);
  const Tensor logits = random_matrix(rng, 3, 5);
  const std::vector<std::int32_t> tg = {4, 0, 2};
  double brute = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(double(logits.at(r, c)));
    brute -= double(logits.at(r, tg[r])) - std::log(z);
  }
  CHECK(cross_entropy(logits, tg, {true, true, true}).item() == doctest::Approx(brute / 3).epsilon(1e-12));
  CHECK(cross_entropy(logits, tg, {true, false, true}).item() != doctest::Approx(brute / 3));
  CHECK_THROWS_AS(cross_entropy(logits, tg, {false, false, false}), ContractError);
}

TEST_CASE("backward basics and non-scalar loss") {
  Rng rng(9);
  Tensor x = random_matrix(rng, 2, 3, true);
  backward(sum(x));
  for (auto g : x.grad()) CHECK(g == 1);
  x.zero_grad();
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]));
  CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("composite graph gradients match finite differences") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_matrix(rng, 4, 6, true);
    const Tensor w = random_matrix(rng, 6, 5);
    const Tensor g = random_matrix(rng, 1, 6), b = random_matrix(rng, 1, 6);
    const Tensor cols = random_matrix(rng, 1, 5);
    std::vector<Real> m(16, 0);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = i + 1; j < 4; ++j) m[i * 4 + j] = -INFINITY;
    }
    const Tensor mask = Tensor::matrix(4, 4, m);
    const Activation kind = trial % 2 ? Activation::relu : Activation::silu;
    const std::vector<std::int32_t> tg = {1, 3, 0, 4};
    auto graph = [&] {
      Tensor h = layernorm(x, g, b, 1e-5);
      Tensor att = softmax_masked(matmul_bt(h, h), mask);
      Tensor z = act_fn(matmul(matmul(att, h), w), kind);
      z = scale_columns(add(z, scale(z, 0.5)), cols.data());
      Tensor rows = gather_rows(z, std::vector<std::size_t>{0, 2, 3, 1});
      Tensor cat = concat_cols(std::vector<Tensor>{slice(rows, 0, 4, 0, 3), slice(rows, 0, 4, 3, 2)});
      Tensor mixed = sub(add(cat, scale(transpose(transpose(cat)), 0.1)), scale(cat, 0.3));
      return cross_entropy(mixed, tg, {true, true, false, true});
    };
    backward(graph());
    auto f = [&] {
      NoGradGuard ng;
      return double(graph().item());
    };
    const auto num = numeric_grad(x, f);
    for (std::size_t i = 0; i < num.size(); ++i) CHECK(rel_err(num[i], x.grad()[i]) <= 1e-4);
  }
}

TEST_CASE("tensor invariants and shape errors") {
  const Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.data().size() == shape_size(t.shape()));
  CHECK_THROWS_AS(Tensor::matrix(2, 2, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(add(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {1, 2})), DimensionError);
  Tensor leaf = Tensor::matrix(1, 2, {1, 2});
  leaf.set_requires_grad(true);
  backward(sum(scale(leaf, 3)));
  CHECK(leaf.grad().size() == leaf.data().size());
}
