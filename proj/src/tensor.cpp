#include "hapnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace hapnet {

namespace {

thread_local bool g_grad_enabled = true;
bool g_finite_checks = false;

void check_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

void Node::accumulate(std::span<const double> g) {
  if (!requires_grad) return;
  auto& buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

namespace {

Tensor finish(const char* op, Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
              std::function<void(const std::vector<double>&)> backward) {
  if (numel(shape) != value.size()) {
    throw ShapeError(std::string(op) + ": value count does not match shape " + to_string(shape));
  }
  if (g_finite_checks) {
    for (double v : value) {
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || (p.defined() && p.requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace

Tensor make_result(const char* op, Shape shape, std::vector<double> value, std::initializer_list<Tensor> parents,
                   std::function<void(const std::vector<double>&)> backward) {
  return finish(op, std::move(shape), std::move(value), std::vector<Tensor>(parents), std::move(backward));
}

Tensor make_result(const char* op, Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
                   std::function<void(const std::vector<double>&)> backward) {
  return finish(op, std::move(shape), std::move(value), parents, std::move(backward));
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(hapnet::numel(shape), value);
  return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (hapnet::numel(shape) != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad_buffer(); }

std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

bool Tensor::is_leaf() const { return !node_->backward; }

const char* Tensor::op_name() const { return node_->op; }

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + to_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; each node is emitted once. `order` owns the
  // nodes so releasing parents mid-sweep cannot free a pending node.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(node_, 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      const auto& p = n->parents[next++];
      if (p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(std::move(n));
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = it->get();
    if (!n->backward) continue;
    if (!n->grad.empty()) n->backward(n->grad);
    // Release the interior of the graph.
    n->backward = nullptr;
    n->parents.clear();
    if (n != node_.get()) std::vector<double>().swap(n->grad);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

}  // namespace hapnet
