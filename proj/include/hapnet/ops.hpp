#pragma once

// Differentiable operator set. Every op records its own backward rule and
// is covered by the finite-difference suite in gradcheck.hpp.

#include <cstddef>
#include <span>
#include <vector>

#include "hapnet/tensor.hpp"

namespace hapnet {

enum class Trans { No, Yes };

/// op(a) * op(b). Rank-2 operands multiply directly; rank-3 operands are
/// batched along axis 0, and a rank-2 operand broadcasts over the batch.
Tensor matmul(const Tensor& a, const Tensor& b, Trans ta = Trans::No, Trans tb = Trans::No);

// Elementwise with right-aligned broadcasting of size-1 / missing axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor relu(const Tensor& x);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// Max-shifted softmax along one axis.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Mean softmax cross-entropy of [batch x classes] logits against 0-based labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over one axis; the axis is removed from the shape.
Tensor mean_axis(const Tensor& x, std::size_t axis);

/// Same values, new shape (element count must match).
Tensor reshape(const Tensor& x, Shape shape);
/// Output axis i is input axis perm[i].
Tensor permute(const Tensor& x, std::span<const std::size_t> perm);
Tensor permute(const Tensor& x, std::initializer_list<std::size_t> perm);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

/// Average pooling with window = stride = factor along one axis. The last
/// window may be partial and averages over its actual length, so the
/// output length is ceil(len / factor).
Tensor avg_pool(const Tensor& x, std::size_t axis, std::size_t factor);

/// Normalizes each fiber along `axis`, then applies gamma/beta of that
/// axis length.
Tensor layer_norm(const Tensor& x, std::size_t axis, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// x[..., in] * w[out, in]^T + b[out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Per-channel 2-D cross-correlation with reflect padding. x is C x H x W or
/// B x C x H x W, kernels C x k x k with k odd.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernels);

/// Dense 2-D cross-correlation with reflect padding, stride 1.
/// x is B x Cin x H x W, weight Cout x Cin x k x k.
Tensor conv2d(const Tensor& x, const Tensor& weight);

/// Real 2-D FFT over the two trailing axes: [..., H, W] -> [..., H, W/2+1, 2]
/// where the last axis holds (re, im). Unnormalized.
Tensor rfft2(const Tensor& x);
/// Inverse of rfft2 back to [..., H, width], normalized by 1/(H*width).
Tensor irfft2(const Tensor& spectrum, std::size_t width);
/// Complex product on (re, im) pairs, broadcasting like mul() over the
/// leading axes.
Tensor complex_mul(const Tensor& a, const Tensor& b);

/// Index of the reflected coordinate for padding (no edge repeat).
std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n);

}  // namespace hapnet
