#pragma once

// Dense 64-bit tensors with a reverse-mode autodiff graph.
//
// A Tensor is a cheap handle onto a shared graph node. Values are row-major
// and never change after an op produced them; the only mutation points are
// leaf parameters (optimizer updates) and gradient buffers.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hapnet/error.hpp"

namespace hapnet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents.
  std::function<void(const std::vector<double>& grad_out)> backward;
  const char* op = "leaf";

  void accumulate(std::span<const double> g);
  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Direct write access, only for leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  bool is_leaf() const;
  const char* op_name() const;

  /// New leaf sharing no graph history (values copied).
  Tensor detach() const;

  /// Reverse sweep from a scalar. Intermediate nodes release their
  /// closures afterwards; leaf grads accumulate across calls.
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// When on, every op result is scanned and a NumericError names the op
/// that produced a NaN or Inf.
void set_finite_checks(bool on);
bool finite_checks();

namespace detail {

/// Builds an op result, wiring parents and the backward closure only when
/// recording is on and some parent needs a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::initializer_list<Tensor> parents,
                   std::function<void(const std::vector<double>&)> backward);
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   const std::vector<Tensor>& parents,
                   std::function<void(const std::vector<double>&)> backward);

}  // namespace detail

}  // namespace hapnet
