#include <cmath>

#include "doctest.h"
#include "hapnet/error.hpp"
#include "hapnet/gradcheck.hpp"
#include "hapnet/pffm.hpp"
#include "oracles.hpp"

using namespace hapnet;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Half spectrum of a real kernel, so K is Hermitian-consistent by construction.
Tensor filter_from_kernel(const std::vector<double>& kernel, std::size_t C, std::size_t H, std::size_t W) {
  const std::size_t wh = W / 2 + 1;
  std::vector<double> k(C * H * wh * 2);
  for (std::size_t c = 0; c < C; ++c) {
    const std::vector<double> kc(kernel.begin() + c * H * W, kernel.begin() + (c + 1) * H * W);
    const auto spec = oracle::dft2(kc, H, W);
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t j = 0; j < wh; ++j) {
        k[((c * H + r) * wh + j) * 2] = spec[r * W + j].real();
        k[((c * H + r) * wh + j) * 2 + 1] = spec[r * W + j].imag();
      }
    }
  }
  return Tensor::from({C, H, wh, 2}, k);
}

}  // namespace

TEST_CASE("global filter equals per-channel circular convolution with irfft2(K)") {
  Rng rng(31);
  for (auto [H, W] : {std::pair<std::size_t, std::size_t>{4, 4}, {5, 3}, {6, 7}}) {
    const std::size_t C = 2;
    const auto kernel = oracle::normals(rng, C * H * W);
    const GlobalFilter filter(filter_from_kernel(kernel, C, H, W), W);
    const auto kspatial = values(irfft2(filter.weights(), W));
    CHECK(oracle::max_abs_diff(kspatial, kernel) < 1e-12);
    const auto x = oracle::normals(rng, C * H * W);
    const auto y = values(global_filter_apply(Tensor::from({C, H, W}, x), filter));
    for (std::size_t c = 0; c < C; ++c) {
      const std::vector<double> xc(x.begin() + c * H * W, x.begin() + (c + 1) * H * W);
      const std::vector<double> kc(kspatial.begin() + c * H * W, kspatial.begin() + (c + 1) * H * W);
      const auto ref = oracle::circular_conv(xc, kc, H, W);
      const std::vector<double> yc(y.begin() + c * H * W, y.begin() + (c + 1) * H * W);
      CHECK(oracle::max_abs_diff(yc, ref) < 1e-9);
    }
  }
}

TEST_CASE("identity filter, zero input and shape guards") {
  Rng rng(32);
  ParameterStore store;
  const GlobalFilter ones(store, "k", 2, 4, 4);
  const auto x = oracle::normals(rng, 2 * 2 * 4 * 4);
  CHECK(oracle::max_abs_diff(values(global_filter_apply(Tensor::from({2, 2, 4, 4}, x), ones)), x) < 1e-10);
  const Tensor zero_out = global_filter_apply(Tensor::zeros({2, 4, 4}), ones);
  for (double v : zero_out.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(global_filter_apply(Tensor::zeros({3, 4, 4}), ones), ShapeError);
  CHECK_THROWS_AS(global_filter_apply(Tensor::zeros({2, 4, 5}), ones), ShapeError);
  CHECK_THROWS_AS(GlobalFilter(Tensor::zeros({2, 4, 4, 2}), 4), ShapeError);
}

TEST_CASE("fusion composes the product gate with the modality sum") {
  Rng rng(33);
  ParameterStore store;
  GlobalFilter filter(store, "k", 3, 5, 5);
  for (auto& v : filter.weights().mutable_data()) v += rng.normal(0.0, 0.5);
  const Tensor fh = Tensor::from({3, 5, 5}, oracle::normals(rng, 75));
  const Tensor fs = Tensor::from({3, 5, 5}, oracle::normals(rng, 75));
  const FusionPair p = pffm_fuse_detailed(fh, fs, filter);
  const auto prod = values(mul(fh, fs));
  const auto w = values(irfft2(complex_mul(rfft2(Tensor::from({3, 5, 5}, prod)), filter.weights()), 5));
  std::vector<double> expect(75);
  for (std::size_t i = 0; i < 75; ++i) expect[i] = w[i] * (fh[i] + fs[i]);
  CHECK(oracle::max_abs_diff(values(p.fused), expect) < 1e-10);
  CHECK(oracle::max_abs_diff(values(p.weights), w) < 1e-10);
  for (const Tensor* t : {&p.hsi, &p.sar, &p.product, &p.weights, &p.fused}) CHECK(t->shape() == fh.shape());

  // Swapping the modalities gives bit-identical output.
  CHECK(values(pffm_fuse(fs, fh, filter)) == values(p.fused));
  // A silent SAR map annihilates the fused output.
  const Tensor silent = pffm_fuse(fh, Tensor::zeros({3, 5, 5}), filter);
  for (double v : silent.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(pffm_fuse(fh, Tensor::zeros({3, 5, 4}), filter), ShapeError);
}

TEST_CASE("identity filter fuses to (F_h * F_s) * (F_h + F_s)") {
  Rng rng(34);
  ParameterStore store;
  const GlobalFilter ones(store, "k", 2, 6, 6);
  const Tensor fh = Tensor::from({2, 6, 6}, oracle::normals(rng, 72));
  const Tensor fs = Tensor::from({2, 6, 6}, oracle::normals(rng, 72));
  const auto fused = values(pffm_fuse(fh, fs, ones));
  for (std::size_t i = 0; i < 72; ++i) CHECK(std::abs(fused[i] - fh[i] * fs[i] * (fh[i] + fs[i])) < 1e-10);
}

TEST_CASE("PFFM gradient checks pass") {
  for (const auto& r : run_gradcheck_suite("pffm", 5)) {
    INFO(r.name << " " << r.max_relative_error);
    CHECK(r.max_relative_error < 1e-4);
  }
}
