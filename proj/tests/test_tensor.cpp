#include <cmath>
#include <numeric>

#include "doctest.h"
#include "hapnet/error.hpp"
#include "hapnet/gemm.hpp"
#include "hapnet/ops.hpp"
#include "hapnet/random.hpp"
#include "oracles.hpp"

using namespace hapnet;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor randn(Shape shape, Rng& rng, bool grad = false) {
  return Tensor::from(shape, oracle::normals(rng, numel(shape)), grad);
}

}  // namespace

TEST_CASE("gemm matches the naive triple loop for every transpose combination") {
  Rng rng(3);
  for (std::size_t m : {1, 3, 5, 9}) {
    for (std::size_t n : {1, 4, 7}) {
      for (std::size_t k : {1, 2, 6}) {
        const auto a = oracle::normals(rng, m * k), b = oracle::normals(rng, k * n);
        const auto ref = oracle::matmul(oracle::matrix(m, k, a), oracle::matrix(k, n, b));
        for (int ta = 0; ta < 2; ++ta) {
          for (int tb = 0; tb < 2; ++tb) {
            std::vector<double> at(a), bt(b);
            if (ta) {
              for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
              }
            }
            if (tb) {
              for (std::size_t p = 0; p < k; ++p) {
                for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
              }
            }
            std::vector<double> c(m * n, 1.0);
            kernels::gemm(m, n, k, at.data(), ta, bt.data(), tb, c.data(), false);
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t j = 0; j < n; ++j) CHECK(c[i * n + j] == doctest::Approx(ref[i][j]).epsilon(1e-12));
            }
          }
        }
      }
    }
  }
}

TEST_CASE("batched matmul broadcasts a rank-2 operand") {
  Rng rng(4);
  Tensor a = randn({3, 2, 4}, rng), b = randn({4, 5}, rng);
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{3, 2, 5});
  const auto bm = oracle::matrix(4, 5, values(b));
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> slice(a.data().begin() + i * 8, a.data().begin() + (i + 1) * 8);
    const auto ref = oracle::matmul(oracle::matrix(2, 4, slice), bm);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t j = 0; j < 5; ++j) CHECK(c[(i * 2 + r) * 5 + j] == doctest::Approx(ref[r][j]).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(matmul(a, randn({3, 5}, rng)), ShapeError);
}

TEST_CASE("broadcasting follows right-aligned numpy rules") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({3}, {10, 20, 30});
  CHECK(values(add(a, b)) == std::vector<double>{11, 22, 33, 14, 25, 36});
  Tensor col = Tensor::from({2, 1}, {2, 3});
  CHECK(values(mul(a, col)) == std::vector<double>{2, 4, 6, 12, 15, 18});
  CHECK_THROWS_AS(add(a, Tensor::from({2}, {1, 2})), ShapeError);
}

TEST_CASE("softmax agrees with an extended-precision oracle and survives large logits") {
  Rng rng(5);
  Tensor x = randn({4, 6}, rng);
  Tensor y = softmax(x, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> row(x.data().begin() + r * 6, x.data().begin() + (r + 1) * 6);
    const auto ref = oracle::softmax(row);
    double total = 0.0;
    for (std::size_t c = 0; c < 6; ++c) {
      CHECK(std::abs(y[r * 6 + c] - ref[c]) < 1e-15);
      total += y[r * 6 + c];
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  Tensor big = softmax(Tensor::from({1, 3}, {1000.0, 1001.0, 999.0}), 1);
  for (double v : big.data()) CHECK(std::isfinite(v));
}

TEST_CASE("avg_pool averages windows and a trailing partial window") {
  Tensor x = Tensor::from({1, 5, 1}, {1, 2, 3, 4, 10});
  CHECK(values(avg_pool(x, 1, 2)) == std::vector<double>{1.5, 3.5, 10.0});
  CHECK(values(avg_pool(x, 1, 1)) == values(x));
  CHECK_THROWS_AS(avg_pool(x, 1, 0), ConfigError);
}

TEST_CASE("depthwise and dense convolution match sliding-window oracles with reflect padding") {
  Rng rng(6);
  const std::size_t B = 2, C = 3, H = 5, W = 4;
  Tensor x = randn({B, C, H, W}, rng), k = randn({C, 3, 3}, rng), w = randn({2, C, 3, 3}, rng);
  Tensor dw = depthwise_conv2d(x, k), full = conv2d(x, w);
  auto at = [&](std::size_t b, std::size_t c, std::ptrdiff_t r, std::ptrdiff_t col) {
    const auto rr = static_cast<std::size_t>(reflect_index(r, H));
    const auto cc = static_cast<std::size_t>(reflect_index(col, W));
    return x[((b * C + c) * H + rr) * W + cc];
  };
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t col = 0; col < W; ++col) {
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int u = -1; u <= 1; ++u) {
            for (int v = -1; v <= 1; ++v) {
              acc += k[(c * 3 + (u + 1)) * 3 + (v + 1)] * at(b, c, static_cast<std::ptrdiff_t>(r) + u, static_cast<std::ptrdiff_t>(col) + v);
            }
          }
          CHECK(dw[((b * C + c) * H + r) * W + col] == doctest::Approx(acc).epsilon(1e-12));
        }
        for (std::size_t o = 0; o < 2; ++o) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            for (int u = -1; u <= 1; ++u) {
              for (int v = -1; v <= 1; ++v) {
                acc += w[((o * C + c) * 3 + (u + 1)) * 3 + (v + 1)] *
                       at(b, c, static_cast<std::ptrdiff_t>(r) + u, static_cast<std::ptrdiff_t>(col) + v);
              }
            }
          }
          CHECK(full[((b * 2 + o) * H + r) * W + col] == doctest::Approx(acc).epsilon(1e-12));
        }
      }
    }
  }
  CHECK(reflect_index(-1, 5) == 1);
  CHECK(reflect_index(5, 5) == 3);
}

TEST_CASE("layer_norm gives zero mean and unit variance fibers") {
  Rng rng(7);
  Tensor x = randn({2, 4, 3}, rng);
  Tensor y = layer_norm(x, 1, Tensor::full({4}, 1.0), Tensor::zeros({4}), 0.0);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < 3; ++i) {
      double m = 0.0, v = 0.0;
      for (std::size_t c = 0; c < 4; ++c) m += y[(b * 4 + c) * 3 + i] / 4.0;
      for (std::size_t c = 0; c < 4; ++c) v += std::pow(y[(b * 4 + c) * 3 + i] - m, 2) / 4.0;
      CHECK(std::abs(m) < 1e-12);
      CHECK(std::abs(v - 1.0) < 1e-10);
    }
  }
}

TEST_CASE("permute and reshape move values to the expected positions") {
  Tensor x = Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5});
  CHECK(values(permute(x, {1, 0})) == std::vector<double>{0, 3, 1, 4, 2, 5});
  CHECK(reshape(x, {3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);
  Tensor c = concat({x, Tensor::from({1, 3}, {9, 9, 9})}, 0);
  CHECK(values(c) == std::vector<double>{0, 1, 2, 3, 4, 5, 9, 9, 9});
}

TEST_CASE("cross_entropy equals the mean negative log-softmax") {
  Tensor logits = Tensor::from({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
  const std::vector<int> labels{1, 0};
  const auto p0 = oracle::softmax({1.0, 2.0, 0.5}), p1 = oracle::softmax({-1.0, 0.0, 3.0});
  const double expected = -(std::log(p0[1]) + std::log(p1[0])) / 2.0;
  CHECK(cross_entropy(logits, labels).item() == doctest::Approx(expected).epsilon(1e-14));
  const std::vector<int> bad{3, 0};
  CHECK_THROWS(cross_entropy(logits, bad));
}

TEST_CASE("backward handles shared subexpressions once and accumulates leaf grads") {
  Tensor x = Tensor::from({2}, {3.0, -2.0}, true);
  Tensor y = mul(x, x);
  Tensor loss = sum(add(y, y));  // 2 x^2, gradient 4x
  loss.backward();
  CHECK(values(Tensor::from({2}, {x.grad()[0], x.grad()[1]})) == std::vector<double>{12.0, -8.0});
  sum(x).backward();
  CHECK(x.grad()[0] == 13.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
  CHECK_THROWS_AS(mul(x, x).backward(), ShapeError);
}

TEST_CASE("NoGradGuard suppresses graph recording") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  {
    NoGradGuard guard;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.is_leaf());
  }
  CHECK(mul(x, x).requires_grad());
}
