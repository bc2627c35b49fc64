#include <cmath>
#include <complex>

#include "doctest.h"
#include "hapnet/fft.hpp"
#include "hapnet/ops.hpp"
#include "oracles.hpp"

using namespace hapnet;

TEST_CASE("1-D plans match the naive DFT on radix-2, direct and Bluestein lengths") {
  Rng rng(11);
  for (std::size_t n : {1, 2, 3, 5, 8, 11, 16, 24, 25, 27, 30, 31, 64}) {
    std::vector<fft::cplx> x(n);
    for (auto& v : x) v = {rng.normal(), rng.normal()};
    std::vector<fft::cplx> y = x;
    fft::plan(n).forward(y);
    for (std::size_t k = 0; k < n; ++k) {
      std::complex<long double> acc = 0.0L;
      for (std::size_t j = 0; j < n; ++j) {
        const long double phase = -2.0L * std::numbers::pi_v<long double> * static_cast<long double>((j * k) % n) / n;
        acc += std::complex<long double>(x[j].real(), x[j].imag()) * std::polar(1.0L, phase);
      }
      CHECK(std::abs(y[k].real() - static_cast<double>(acc.real())) < 1e-10);
      CHECK(std::abs(y[k].imag() - static_cast<double>(acc.imag())) < 1e-10);
    }
    fft::plan(n).inverse(y);
    for (std::size_t j = 0; j < n; ++j) CHECK(std::abs(y[j] / static_cast<double>(n) - x[j]) < 1e-12);
  }
}

TEST_CASE("rfft2 equals the half spectrum of a naive 2-D DFT") {
  Rng rng(12);
  for (std::size_t h = 1; h <= 8; ++h) {
    for (std::size_t w = 1; w <= 8; ++w) {
      const auto x = oracle::normals(rng, h * w);
      const auto ref = oracle::dft2(x, h, w);
      const Tensor spec = rfft2(Tensor::from({h, w}, x));
      const std::size_t hw = w / 2 + 1;
      REQUIRE(spec.shape() == Shape{h, hw, 2});
      double err = 0.0;
      for (std::size_t k1 = 0; k1 < h; ++k1) {
        for (std::size_t k2 = 0; k2 < hw; ++k2) {
          err = std::max(err, std::abs(spec[(k1 * hw + k2) * 2] - ref[k1 * w + k2].real()));
          err = std::max(err, std::abs(spec[(k1 * hw + k2) * 2 + 1] - ref[k1 * w + k2].imag()));
        }
      }
      CHECK(err < 1e-9);
    }
  }
}

TEST_CASE("irfft2 inverts rfft2 and drops non-Hermitian parts of self-conjugate bins") {
  Rng rng(13);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{4, 4}, {3, 5}, {6, 7}, {8, 2}}) {
    const auto x = oracle::normals(rng, 2 * h * w);
    const Tensor back = irfft2(rfft2(Tensor::from({2, h, w}, x)), w);
    CHECK(oracle::max_abs_diff({back.data().begin(), back.data().end()}, x) < 1e-12);
  }
  // A purely imaginary DC bin carries no real signal.
  std::vector<double> spec(4 * 3 * 2, 0.0);
  spec[1] = 5.0;
  const Tensor out = irfft2(Tensor::from({4, 3, 2}, spec), 4);
  for (double v : out.data()) CHECK(std::abs(v) < 1e-15);
}

TEST_CASE("rfft2 is linear") {
  Rng rng(14);
  const auto a = oracle::normals(rng, 30), b = oracle::normals(rng, 30);
  std::vector<double> mix(30);
  for (std::size_t i = 0; i < 30; ++i) mix[i] = 2.5 * a[i] - 0.75 * b[i];
  const Tensor fa = rfft2(Tensor::from({5, 6}, a)), fb = rfft2(Tensor::from({5, 6}, b));
  const Tensor fm = rfft2(Tensor::from({5, 6}, mix));
  for (std::size_t i = 0; i < fm.numel(); ++i) CHECK(std::abs(fm[i] - (2.5 * fa[i] - 0.75 * fb[i])) < 1e-10);
}

TEST_CASE("complex_mul multiplies (re, im) pairs and broadcasts") {
  Tensor a = Tensor::from({2, 1, 2}, {1, 2, 3, -1});
  Tensor b = Tensor::from({1, 2}, {0, 1});
  const Tensor c = complex_mul(a, b);  // times i
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{-2, 1, 1, 3});
}
