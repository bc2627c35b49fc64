#pragma once

// Frequency-domain fusion of two modality feature maps through a learnable
// global filter on the real half spectrum.

#include <cstddef>
#include <string>

#include "hapnet/nn.hpp"

namespace hapnet {

/// Learnable complex filter K of shape C x H x (W/2+1), stored as a real
/// C x H x (W/2+1) x 2 tensor of (re, im) pairs.
class GlobalFilter {
 public:
  GlobalFilter() = default;
  /// K starts as the identity filter (all ones, zero imaginary part).
  GlobalFilter(ParameterStore& store, const std::string& name, std::size_t channels, std::size_t height,
               std::size_t width);
  /// Unregistered filter around existing weights.
  GlobalFilter(Tensor weights, std::size_t width);

  const Tensor& weights() const { return weights_; }
  Tensor& weights() { return weights_; }
  std::size_t channels() const { return weights_.dim(0); }
  std::size_t height() const { return weights_.dim(1); }
  std::size_t width() const { return width_; }

 private:
  Tensor weights_;
  std::size_t width_ = 0;
};

/// irfft2(K * rfft2(x)) per channel; x is C x H x W or B x C x H x W.
Tensor global_filter_apply(const Tensor& x, const GlobalFilter& filter);

struct FusionPair {
  Tensor hsi;      // F_h
  Tensor sar;      // F_s
  Tensor product;  // F_f = F_h * F_s
  Tensor weights;  // W = filter(F_f)
  Tensor fused;    // F_fus = W * (F_h + F_s)
};

FusionPair pffm_fuse_detailed(const Tensor& hsi, const Tensor& sar, const GlobalFilter& filter);

inline Tensor pffm_fuse(const Tensor& hsi, const Tensor& sar, const GlobalFilter& filter) {
  return pffm_fuse_detailed(hsi, sar, filter).fused;
}

}  // namespace hapnet
