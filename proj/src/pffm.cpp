#include "hapnet/pffm.hpp"

#include "hapnet/fft.hpp"

namespace hapnet {

namespace {

Tensor identity_filter(std::size_t channels, std::size_t height, std::size_t width) {
  const std::size_t wh = fft::half_width(width);
  std::vector<double> values(channels * height * wh * 2, 0.0);
  for (std::size_t i = 0; i < values.size(); i += 2) values[i] = 1.0;
  return Tensor::from({channels, height, wh, 2}, std::move(values));
}

}  // namespace

GlobalFilter::GlobalFilter(ParameterStore& store, const std::string& name, std::size_t channels,
                           std::size_t height, std::size_t width)
    : weights_(store.add(name + ".filter", identity_filter(channels, height, width))), width_(width) {}

GlobalFilter::GlobalFilter(Tensor weights, std::size_t width) : weights_(std::move(weights)), width_(width) {
  if (weights_.rank() != 4 || weights_.dim(3) != 2 || weights_.dim(2) != fft::half_width(width)) {
    throw ShapeError("global filter: weights " + to_string(weights_.shape()) + " do not describe a half spectrum of width " +
                     std::to_string(width));
  }
}

Tensor global_filter_apply(const Tensor& x, const GlobalFilter& filter) {
  const std::size_t r = x.rank();
  if (r != 3 && r != 4) throw ShapeError("global filter: expected C x H x W input, got " + to_string(x.shape()));
  const std::size_t C = x.dim(r - 3), H = x.dim(r - 2), W = x.dim(r - 1);
  if (C != filter.channels() || H != filter.height() || W != filter.width()) {
    throw ShapeError("global filter: filter for " + std::to_string(filter.channels()) + "x" +
                     std::to_string(filter.height()) + "x" + std::to_string(filter.width()) +
                     " maps applied to " + to_string(x.shape()));
  }
  return irfft2(complex_mul(rfft2(x), filter.weights()), W);
}

FusionPair pffm_fuse_detailed(const Tensor& hsi, const Tensor& sar, const GlobalFilter& filter) {
  if (hsi.shape() != sar.shape()) {
    throw ShapeError("fusion: HSI features " + to_string(hsi.shape()) + " and SAR features " + to_string(sar.shape()) +
                     " differ");
  }
  FusionPair p;
  p.hsi = hsi;
  p.sar = sar;
  p.product = mul(hsi, sar);
  p.weights = global_filter_apply(p.product, filter);
  p.fused = mul(p.weights, add(hsi, sar));
  return p;
}

}  // namespace hapnet
