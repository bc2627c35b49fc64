#pragma once

// Parameter registry and the small layers every block is assembled from.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "hapnet/ops.hpp"
#include "hapnet/random.hpp"
#include "hapnet/tensor.hpp"

namespace hapnet {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

/// Ordered, name-addressed set of trainable leaves. Registration order is
/// the checkpoint order and the optimizer order.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Tensor value);

  std::vector<NamedParameter>& entries() { return entries_; }
  const std::vector<NamedParameter>& entries() const { return entries_; }
  const Tensor* find(const std::string& name) const;

  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<NamedParameter> entries_;
};

Tensor normal_init(Shape shape, double stddev, Rng& rng);

struct Linear {
  Tensor weight;  // out x in
  Tensor bias;    // out

  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         double stddev = 0.02);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

/// Reflect-padded stride-1 convolution with bias over B x C x H x W.
struct Conv2d {
  Tensor weight;  // out x in x k x k
  Tensor bias;    // out

  Conv2d() = default;
  /// stddev <= 0 selects fan-in scaling sqrt(2 / (in * k * k)).
  Conv2d(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
         Rng& rng, double stddev = 0.0);
  Tensor operator()(const Tensor& x) const;
};

/// Layer normalization across the channel axis of B x C x H x W (per pixel).
struct ChannelNorm {
  Tensor gamma;
  Tensor beta;

  ChannelNorm() = default;
  ChannelNorm(ParameterStore& store, const std::string& name, std::size_t channels);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, 1, gamma, beta); }
};

}  // namespace hapnet
