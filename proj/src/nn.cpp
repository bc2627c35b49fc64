#include "hapnet/nn.hpp"

#include <cmath>

namespace hapnet {

Tensor ParameterStore::add(const std::string& name, Tensor value) {
  if (find(name)) throw ConfigError("duplicate parameter name: " + name);
  value.set_requires_grad(true);
  entries_.push_back({name, value});
  return value;
}

const Tensor* ParameterStore::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  const std::size_t n = numel(shape);
  return Tensor::from(std::move(shape), rng.normals(n, stddev));
}

Linear::Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
               double stddev)
    : weight(store.add(name + ".weight", normal_init({out, in}, stddev, rng))),
      bias(store.add(name + ".bias", Tensor::zeros({out}))) {}

Conv2d::Conv2d(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
               Rng& rng, double stddev) {
  if (stddev <= 0.0) stddev = std::sqrt(2.0 / static_cast<double>(in * kernel * kernel));
  weight = store.add(name + ".weight", normal_init({out, in, kernel, kernel}, stddev, rng));
  bias = store.add(name + ".bias", Tensor::zeros({out}));
}

Tensor Conv2d::operator()(const Tensor& x) const {
  return add(conv2d(x, weight), reshape(bias, {bias.numel(), 1, 1}));
}

ChannelNorm::ChannelNorm(ParameterStore& store, const std::string& name, std::size_t channels)
    : gamma(store.add(name + ".gamma", Tensor::full({channels}, 1.0))),
      beta(store.add(name + ".beta", Tensor::zeros({channels}))) {}

}  // namespace hapnet
