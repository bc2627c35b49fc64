#include "hapnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "hapnet/fft.hpp"
#include "hapnet/gemm.hpp"

namespace hapnet {

using detail::make_result;
using detail::Node;

namespace {

// Outer x len x inner decomposition around one axis.
struct AxisView {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[offset + i] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return strides;
}

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
    const std::size_t db = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    bc.out[i] = std::max(da, db);
  }
  bc.stride_a = aligned_strides(a, bc.out);
  bc.stride_b = aligned_strides(b, bc.out);
  return bc;
}

// Calls f(o, ia, ib, n, step_a, step_b) for each run along the last axis.
template <class F>
void for_each_run(const Broadcast& bc, F&& f) {
  const std::size_t rank = bc.out.size();
  const std::size_t n = bc.out[rank - 1];
  const std::size_t step_a = bc.stride_a[rank - 1];
  const std::size_t step_b = bc.stride_b[rank - 1];
  const std::size_t runs = numel(bc.out) / n;
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t r = 0; r < runs; ++r) {
    f(r * n, ia, ib, n, step_a, step_b);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++counter[ax];
      ia += bc.stride_a[ax];
      ib += bc.stride_b[ax];
      if (counter[ax] < bc.out[ax]) break;
      ia -= bc.stride_a[ax] * counter[ax];
      ib -= bc.stride_b[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
}

Tensor unary(const char* op, const Tensor& x, double (*fwd)(double), double (*deriv)(double, double)) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  Node* xn = x.node().get();
  auto result = make_result(op, x.shape(), std::move(out), {x}, nullptr);
  if (result.requires_grad()) {
    Node* yn = result.node().get();
    // The closure lives on yn; capturing yn's value by pointer is safe.
    result.node()->backward = [xn, yn, deriv](const std::vector<double>& g) {
      if (!xn->requires_grad) return;
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xn->value[i], yn->value[i]);
    };
  }
  return result;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

}  // namespace

std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b, Trans ta, Trans tb) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3) {
    throw ShapeError("matmul: operands must be rank 2 or 3, got " + to_string(sa) + " and " + to_string(sb));
  }
  const bool trans_a = ta == Trans::Yes;
  const bool trans_b = tb == Trans::Yes;
  const std::size_t batch_a = sa.size() == 3 ? sa[0] : 1;
  const std::size_t batch_b = sb.size() == 3 ? sb[0] : 1;
  const std::size_t ra = sa[sa.size() - 2], ca = sa[sa.size() - 1];
  const std::size_t rb = sb[sb.size() - 2], cb = sb[sb.size() - 1];
  const std::size_t m = trans_a ? ca : ra;
  const std::size_t k = trans_a ? ra : ca;
  const std::size_t kb = trans_b ? cb : rb;
  const std::size_t n = trans_b ? rb : cb;
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions disagree for " + to_string(sa) + " and " + to_string(sb));
  }
  if (sa.size() == 3 && sb.size() == 3 && batch_a != batch_b) {
    throw ShapeError("matmul: batch sizes disagree for " + to_string(sa) + " and " + to_string(sb));
  }
  const std::size_t batch = std::max(batch_a, batch_b);
  const bool batched = sa.size() == 3 || sb.size() == 3;
  const std::size_t a_step = sa.size() == 3 ? m * k : 0;
  const std::size_t b_step = sb.size() == 3 ? k * n : 0;

  std::vector<double> out(batch * m * n);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::gemm(m, n, k, ad + i * a_step, trans_a, bd + i * b_step, trans_b, out.data() + i * m * n, false);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return make_result("matmul", std::move(shape), std::move(out), {a, b},
                     [=](const std::vector<double>& g) {
                       if (an->requires_grad) {
                         auto& ga = an->grad_buffer();
                         for (std::size_t i = 0; i < batch; ++i) {
                           const double* gi = g.data() + i * m * n;
                           const double* bi = bn->value.data() + i * b_step;
                           double* dst = ga.data() + i * a_step;
                           if (!trans_a) {
                             // dA = dC * op(B)^T
                             kernels::gemm(m, k, n, gi, false, bi, !trans_b, dst, true);
                           } else {
                             // dA = op(B) * dC^T
                             kernels::gemm(k, m, n, bi, trans_b, gi, true, dst, true);
                           }
                         }
                       }
                       if (bn->requires_grad) {
                         auto& gb = bn->grad_buffer();
                         for (std::size_t i = 0; i < batch; ++i) {
                           const double* gi = g.data() + i * m * n;
                           const double* ai = an->value.data() + i * a_step;
                           double* dst = gb.data() + i * b_step;
                           if (!trans_b) {
                             // dB = op(A)^T * dC
                             kernels::gemm(k, n, m, ai, !trans_a, gi, false, dst, true);
                           } else {
                             // dB = dC^T * op(A)
                             kernels::gemm(n, k, m, gi, true, ai, trans_a, dst, true);
                           }
                         }
                       }
                     });
}

// ----------------------------------------------------------- elementwise

namespace {

enum class Binary { Add, Sub, Mul };

Tensor binary(const char* op, Binary kind, const Tensor& a, const Tensor& b) {
  require_defined(a, op);
  require_defined(b, op);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = kind == Binary::Add ? ad[i] + bd[i] : kind == Binary::Sub ? ad[i] - bd[i] : ad[i] * bd[i];
    }
    Node* an = a.node().get();
    Node* bn = b.node().get();
    return make_result(op, a.shape(), std::move(out), {a, b}, [=](const std::vector<double>& g) {
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        if (kind == Binary::Mul) {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        if (kind == Binary::Mul) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
        } else if (kind == Binary::Sub) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      }
    });
  }

  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), op));
  std::vector<double> out(numel(bc->out));
  for_each_run(*bc, [&](std::size_t o, std::size_t ia, std::size_t ib, std::size_t n, std::size_t sa, std::size_t sb) {
    for (std::size_t j = 0; j < n; ++j) {
      const double x = ad[ia + j * sa];
      const double y = bd[ib + j * sb];
      out[o + j] = kind == Binary::Add ? x + y : kind == Binary::Sub ? x - y : x * y;
    }
  });
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return make_result(op, bc->out, std::move(out), {a, b}, [=](const std::vector<double>& g) {
    double* ga = an->requires_grad ? an->grad_buffer().data() : nullptr;
    double* gb = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
    for_each_run(*bc, [&](std::size_t o, std::size_t ia, std::size_t ib, std::size_t n, std::size_t sa,
                          std::size_t sb) {
      for (std::size_t j = 0; j < n; ++j) {
        const double go = g[o + j];
        if (ga) ga[ia + j * sa] += kind == Binary::Mul ? go * bn->value[ib + j * sb] : go;
        if (gb) {
          gb[ib + j * sb] += kind == Binary::Mul ? go * an->value[ia + j * sa] : kind == Binary::Sub ? -go : go;
        }
      }
    });
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", Binary::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", Binary::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", Binary::Mul, a, b); }

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  Node* xn = x.node().get();
  return make_result("scale", x.shape(), std::move(out), {x}, [=](const std::vector<double>& g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + value;
  Node* xn = x.node().get();
  return make_result("add_scalar", x.shape(), std::move(out), {x},
                     [=](const std::vector<double>& g) { xn->accumulate(g); });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v < 0.0 ? 0.0 : v; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double in, double) {
        const double cdf = 0.5 * (1.0 + std::erf(in * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * in * in) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + in * pdf;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double out) { return out * (1.0 - out); });
}

// --------------------------------------------------------------- softmax

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis, "softmax");
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      double mx = xd[base];
      for (std::size_t l = 1; l < v.len; ++l) mx = std::max(mx, xd[base + l * v.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) {
        const double e = std::exp(xd[base + l * v.inner] - mx);
        out[base + l * v.inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t l = 0; l < v.len; ++l) out[base + l * v.inner] *= inv;
    }
  }
  Node* xn = x.node().get();
  auto result = make_result("softmax", x.shape(), std::move(out), {x}, nullptr);
  if (result.requires_grad()) {
    Node* yn = result.node().get();
    result.node()->backward = [xn, yn, v](const std::vector<double>& g) {
      auto& gx = xn->grad_buffer();
      const auto& y = yn->value;
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
          const std::size_t base = o * v.len * v.inner + in;
          double dot = 0.0;
          for (std::size_t l = 0; l < v.len; ++l) dot += g[base + l * v.inner] * y[base + l * v.inner];
          for (std::size_t l = 0; l < v.len; ++l) {
            const std::size_t idx = base + l * v.inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    };
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [batch x classes], got " + to_string(logits.shape()));
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (labels.size() != batch) throw ShapeError("cross_entropy: label count does not match batch");
  auto prob = std::make_shared<std::vector<double>>(logits.numel());
  auto xd = logits.data();
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ShapeError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
    }
    const double* row = xd.data() + b * classes;
    double mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < classes; ++c) (*prob)[b * classes + c] = std::exp(row[c] - lse);
    loss += lse - row[label];
  }
  loss /= static_cast<double>(batch);
  std::vector<int> targets(labels.begin(), labels.end());
  Node* xn = logits.node().get();
  return make_result("cross_entropy", {1}, {loss}, {logits}, [=](const std::vector<double>& g) {
    auto& gx = xn->grad_buffer();
    const double s = g[0] / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double onehot = static_cast<int>(c) == targets[b] ? 1.0 : 0.0;
        gx[b * classes + c] += s * ((*prob)[b * classes + c] - onehot);
      }
    }
  });
}

// ------------------------------------------------------------ reductions

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Node* xn = x.node().get();
  return make_result("sum", {1}, {total}, {x}, [=](const std::vector<double>& g) {
    auto& gx = xn->grad_buffer();
    for (double& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  return scale(sum(x), 1.0 / n);
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis, "mean_axis");
  Shape shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != axis) shape.push_back(x.dim(i));
  }
  if (shape.empty()) shape.push_back(1);
  std::vector<double> out(v.outer * v.inner, 0.0);
  auto xd = x.data();
  const double inv = 1.0 / static_cast<double>(v.len);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t l = 0; l < v.len; ++l) {
      const double* src = xd.data() + (o * v.len + l) * v.inner;
      double* dst = out.data() + o * v.inner;
      for (std::size_t in = 0; in < v.inner; ++in) dst[in] += src[in];
    }
  }
  for (double& val : out) val *= inv;
  Node* xn = x.node().get();
  return make_result("mean_axis", std::move(shape), std::move(out), {x}, [=](const std::vector<double>& g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t l = 0; l < v.len; ++l) {
        double* dst = gx.data() + (o * v.len + l) * v.inner;
        const double* src = g.data() + o * v.inner;
        for (std::size_t in = 0; in < v.inner; ++in) dst[in] += src[in] * inv;
      }
    }
  });
}

// ---------------------------------------------------------------- layout

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  Node* xn = x.node().get();
  return make_result("reshape", std::move(shape), std::move(out), {x},
                     [=](const std::vector<double>& g) { xn->accumulate(g); });
}

Tensor permute(const Tensor& x, std::initializer_list<std::size_t> perm) {
  return permute(x, std::span<const std::size_t>(perm.begin(), perm.size()));
}

Tensor permute(const Tensor& x, std::span<const std::size_t> perm) {
  const std::size_t rank = x.rank();
  if (perm.size() != rank) throw ShapeError("permute: permutation rank mismatch for " + to_string(x.shape()));
  std::vector<bool> used(rank, false);
  for (std::size_t p : perm) {
    if (p >= rank || used[p]) throw ShapeError("permute: invalid permutation for " + to_string(x.shape()));
    used[p] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * x.dim(i + 1);
  Shape shape(rank);
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = x.dim(perm[i]);
    strides[i] = in_strides[perm[i]];
  }
  // Map every output position to its source offset once; reuse for backward.
  auto index = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < index->size(); ++o) {
    (*index)[o] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      src += strides[ax];
      if (counter[ax] < shape[ax]) break;
      src -= strides[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xd[(*index)[o]];
  Node* xn = x.node().get();
  return make_result("permute", std::move(shape), std::move(out), {x}, [=](const std::vector<double>& g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*index)[o]] += g[o];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i != axis && p.dim(i) != shape[i]) {
        throw ShapeError("concat: shapes " + to_string(parts[0].shape()) + " and " + to_string(p.shape()) + " disagree");
      }
    }
    total += p.dim(axis);
  }
  shape[axis] = total;
  const AxisView v = axis_view(shape, axis, "concat");
  std::vector<double> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis);
    auto pd = p.data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(pd.data() + o * len * v.inner, len * v.inner, out.data() + (o * total + offset) * v.inner);
    }
    offset += len;
  }
  std::vector<Node*> nodes;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    nodes.push_back(p.node().get());
    lens.push_back(p.dim(axis));
  }
  return make_result("concat", std::move(shape), std::move(out), parts, [=](const std::vector<double>& g) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      auto& gp = nodes[k]->grad_buffer();
      const std::size_t len = lens[k];
      for (std::size_t o = 0; o < v.outer; ++o) {
        const double* src = g.data() + (o * total + offsets[k]) * v.inner;
        double* dst = gp.data() + o * len * v.inner;
        for (std::size_t i = 0; i < len * v.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

// --------------------------------------------------------------- pooling

Tensor avg_pool(const Tensor& x, std::size_t axis, std::size_t factor) {
  if (factor < 1) throw ConfigError("avg_pool: factor must be >= 1");
  const AxisView v = axis_view(x.shape(), axis, "avg_pool");
  const std::size_t out_len = (v.len + factor - 1) / factor;
  Shape shape = x.shape();
  shape[axis] = out_len;
  std::vector<double> out(v.outer * out_len * v.inner, 0.0);
  auto xd = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t w = 0; w < out_len; ++w) {
      const std::size_t begin = w * factor;
      const std::size_t end = std::min(v.len, begin + factor);
      const double inv = 1.0 / static_cast<double>(end - begin);
      double* dst = out.data() + (o * out_len + w) * v.inner;
      for (std::size_t l = begin; l < end; ++l) {
        const double* src = xd.data() + (o * v.len + l) * v.inner;
        for (std::size_t in = 0; in < v.inner; ++in) dst[in] += src[in];
      }
      for (std::size_t in = 0; in < v.inner; ++in) dst[in] *= inv;
    }
  }
  Node* xn = x.node().get();
  return make_result("avg_pool", std::move(shape), std::move(out), {x}, [=](const std::vector<double>& g) {
    auto& gx = xn->grad_buffer();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t w = 0; w < out_len; ++w) {
        const std::size_t begin = w * factor;
        const std::size_t end = std::min(v.len, begin + factor);
        const double inv = 1.0 / static_cast<double>(end - begin);
        const double* src = g.data() + (o * out_len + w) * v.inner;
        for (std::size_t l = begin; l < end; ++l) {
          double* dst = gx.data() + (o * v.len + l) * v.inner;
          for (std::size_t in = 0; in < v.inner; ++in) dst[in] += src[in] * inv;
        }
      }
    }
  });
}

// ---------------------------------------------------------- normalization

Tensor layer_norm(const Tensor& x, std::size_t axis, const Tensor& gamma, const Tensor& beta, double eps) {
  const AxisView v = axis_view(x.shape(), axis, "layer_norm");
  if (gamma.numel() != v.len || beta.numel() != v.len) {
    throw ShapeError("layer_norm: affine parameters must have length " + std::to_string(v.len));
  }
  const std::size_t fibers = v.outer * v.inner;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(fibers);
  std::vector<double> out(x.numel());
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  const double inv_len = 1.0 / static_cast<double>(v.len);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      double mu = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) mu += xd[base + l * v.inner];
      mu *= inv_len;
      double var = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) {
        const double d = xd[base + l * v.inner] - mu;
        var += d * d;
      }
      var *= inv_len;
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[o * v.inner + in] = is;
      for (std::size_t l = 0; l < v.len; ++l) {
        const std::size_t idx = base + l * v.inner;
        const double h = (xd[idx] - mu) * is;
        (*xhat)[idx] = h;
        out[idx] = gd[l] * h + bd[l];
      }
    }
  }
  Node* xn = x.node().get();
  Node* gn = gamma.node().get();
  Node* bn = beta.node().get();
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta}, [=](const std::vector<double>& g) {
    double* gg = gn->requires_grad ? gn->grad_buffer().data() : nullptr;
    double* gb = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
    double* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
    const auto& h = *xhat;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.len * v.inner + in;
        double mean_dh = 0.0;
        double mean_dh_h = 0.0;
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t idx = base + l * v.inner;
          if (gg) gg[l] += g[idx] * h[idx];
          if (gb) gb[l] += g[idx];
          const double dh = g[idx] * gn->value[l];
          mean_dh += dh;
          mean_dh_h += dh * h[idx];
        }
        if (!gx) continue;
        mean_dh *= inv_len;
        mean_dh_h *= inv_len;
        const double is = (*inv_std)[o * v.inner + in];
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t idx = base + l * v.inner;
          const double dh = g[idx] * gn->value[l];
          gx[idx] += is * (dh - mean_dh - h[idx] * mean_dh_h);
        }
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) throw ShapeError("linear: weight must be [out x in], got " + to_string(weight.shape()));
  const std::size_t in = weight.dim(1);
  const std::size_t out = weight.dim(0);
  if (x.shape().back() != in) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " does not end in " + std::to_string(in));
  }
  if (bias.numel() != out) throw ShapeError("linear: bias length must be " + std::to_string(out));
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Tensor flat = x.rank() == 2 ? x : reshape(x, {x.numel() / in, in});
  Tensor y = add(matmul(flat, weight, Trans::No, Trans::Yes), bias);
  return x.rank() == 2 ? y : reshape(y, std::move(out_shape));
}

// ---------------------------------------------------------- convolutions

namespace {

std::vector<std::size_t> reflect_table(std::size_t n, std::size_t k) {
  // table[i * k + u] = source index for output i, tap u.
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<std::size_t> t(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t u = 0; u < k; ++u) {
      const auto src = static_cast<std::ptrdiff_t>(i + u) - pad;
      t[i * k + u] = static_cast<std::size_t>(reflect_index(src, static_cast<std::ptrdiff_t>(n)));
    }
  }
  return t;
}

}  // namespace

Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernels) {
  const bool batched = x.rank() == 4;
  if (x.rank() != 3 && !batched) throw ShapeError("depthwise_conv2d: input must be CxHxW or BxCxHxW");
  if (kernels.rank() != 3 || kernels.dim(1) != kernels.dim(2) || kernels.dim(1) % 2 == 0) {
    throw ShapeError("depthwise_conv2d: kernels must be C x k x k with k odd, got " + to_string(kernels.shape()));
  }
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t C = x.dim(batched ? 1 : 0);
  const std::size_t H = x.dim(batched ? 2 : 1);
  const std::size_t W = x.dim(batched ? 3 : 2);
  if (kernels.dim(0) != C) {
    throw ShapeError("depthwise_conv2d: " + std::to_string(kernels.dim(0)) + " kernels for " + std::to_string(C) +
                     " channels");
  }
  const std::size_t k = kernels.dim(1);
  auto rows = std::make_shared<std::vector<std::size_t>>(reflect_table(H, k));
  auto cols = std::make_shared<std::vector<std::size_t>>(reflect_table(W, k));
  std::vector<double> out(x.numel(), 0.0);
  auto xd = x.data();
  auto kd = kernels.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = xd.data() + (b * C + c) * H * W;
      const double* ker = kd.data() + c * k * k;
      double* dst = out.data() + (b * C + c) * H * W;
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          double acc = 0.0;
          for (std::size_t u = 0; u < k; ++u) {
            const double* srow = src + (*rows)[i * k + u] * W;
            for (std::size_t v = 0; v < k; ++v) acc += ker[u * k + v] * srow[(*cols)[j * k + v]];
          }
          dst[i * W + j] = acc;
        }
      }
    }
  }
  Node* xn = x.node().get();
  Node* kn = kernels.node().get();
  return make_result("depthwise_conv2d", x.shape(), std::move(out), {x, kernels}, [=](const std::vector<double>& g) {
    double* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
    double* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = xn->value.data() + (b * C + c) * H * W;
        const double* ker = kn->value.data() + c * k * k;
        const double* go = g.data() + (b * C + c) * H * W;
        double* dsrc = gx ? gx + (b * C + c) * H * W : nullptr;
        double* dker = gk ? gk + c * k * k : nullptr;
        for (std::size_t i = 0; i < H; ++i) {
          for (std::size_t j = 0; j < W; ++j) {
            const double gv = go[i * W + j];
            for (std::size_t u = 0; u < k; ++u) {
              const std::size_t r = (*rows)[i * k + u] * W;
              for (std::size_t v = 0; v < k; ++v) {
                const std::size_t s = r + (*cols)[j * k + v];
                if (dker) dker[u * k + v] += gv * src[s];
                if (dsrc) dsrc[s] += gv * ker[u * k + v];
              }
            }
          }
        }
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be B x C x H x W, got " + to_string(x.shape()));
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
    throw ShapeError("conv2d: weight must be Cout x Cin x k x k with k odd, got " + to_string(weight.shape()));
  }
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Cin) {
    throw ShapeError("conv2d: weight " + to_string(weight.shape()) + " does not match input " + to_string(x.shape()));
  }
  const std::size_t HW = H * W;
  const std::size_t K = Cin * k * k;
  std::vector<double> out(B * Cout * HW);
  auto xd = x.data();
  auto wd = weight.data();

  if (k == 1) {
    for (std::size_t b = 0; b < B; ++b) {
      kernels::gemm(Cout, HW, Cin, wd.data(), false, xd.data() + b * Cin * HW, false, out.data() + b * Cout * HW, false);
    }
    Node* xn = x.node().get();
    Node* wn = weight.node().get();
    return make_result("conv2d", {B, Cout, H, W}, std::move(out), {x, weight}, [=](const std::vector<double>& g) {
      for (std::size_t b = 0; b < B; ++b) {
        const double* gb = g.data() + b * Cout * HW;
        if (wn->requires_grad) {
          kernels::gemm(Cout, Cin, HW, gb, false, xn->value.data() + b * Cin * HW, true, wn->grad_buffer().data(), true);
        }
        if (xn->requires_grad) {
          kernels::gemm(Cin, HW, Cout, wn->value.data(), true, gb, false, xn->grad_buffer().data() + b * Cin * HW, true);
        }
      }
    });
  }

  const auto rows = reflect_table(H, k);
  const auto colt = reflect_table(W, k);
  // im2col gather map shared by forward and backward: col entry -> source offset in one channel plane.
  auto gather = std::make_shared<std::vector<std::size_t>>(k * k * HW);
  for (std::size_t u = 0; u < k; ++u) {
    for (std::size_t v = 0; v < k; ++v) {
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          (*gather)[((u * k + v) * H + i) * W + j] = rows[i * k + u] * W + colt[j * k + v];
        }
      }
    }
  }
  auto columns = std::make_shared<std::vector<double>>(B * K * HW);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < Cin; ++c) {
      const double* src = xd.data() + (b * Cin + c) * HW;
      double* dst = columns->data() + (b * K + c * k * k) * HW;
      for (std::size_t t = 0; t < k * k * HW; ++t) dst[t] = src[(*gather)[t]];
    }
    kernels::gemm(Cout, HW, K, wd.data(), false, columns->data() + b * K * HW, false, out.data() + b * Cout * HW, false);
  }
  Node* xn = x.node().get();
  Node* wn = weight.node().get();
  return make_result("conv2d", {B, Cout, H, W}, std::move(out), {x, weight}, [=](const std::vector<double>& g) {
    std::vector<double> dcols(K * HW);
    for (std::size_t b = 0; b < B; ++b) {
      const double* gb = g.data() + b * Cout * HW;
      if (wn->requires_grad) {
        kernels::gemm(Cout, K, HW, gb, false, columns->data() + b * K * HW, true, wn->grad_buffer().data(), true);
      }
      if (xn->requires_grad) {
        kernels::gemm(K, HW, Cout, wn->value.data(), true, gb, false, dcols.data(), false);
        double* gx = xn->grad_buffer().data();
        for (std::size_t c = 0; c < Cin; ++c) {
          double* dst = gx + (b * Cin + c) * HW;
          const double* src = dcols.data() + c * k * k * HW;
          for (std::size_t t = 0; t < k * k * HW; ++t) dst[(*gather)[t]] += src[t];
        }
      }
    }
  });
}

// -------------------------------------------------------------- spectral

Tensor rfft2(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("rfft2: need at least 2 axes, got " + to_string(x.shape()));
  const std::size_t H = x.dim(x.rank() - 2);
  const std::size_t W = x.dim(x.rank() - 1);
  const std::size_t Wh = fft::half_width(W);
  const std::size_t planes = x.numel() / (H * W);
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  shape.push_back(Wh);
  shape.push_back(2);
  std::vector<double> out(planes * H * Wh * 2);
  std::vector<fft::cplx> spec(H * Wh);
  auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    fft::rfft2(xd.subspan(p * H * W, H * W), H, W, spec);
    for (std::size_t i = 0; i < H * Wh; ++i) {
      out[(p * H * Wh + i) * 2] = spec[i].real();
      out[(p * H * Wh + i) * 2 + 1] = spec[i].imag();
    }
  }
  Node* xn = x.node().get();
  return make_result("rfft2", std::move(shape), std::move(out), {x}, [=](const std::vector<double>& g) {
    // Adjoint: dx = Re(unnormalized inverse DFT of the zero-extended half spectrum).
    auto& gx = xn->grad_buffer();
    std::vector<fft::cplx> full(H * W);
    for (std::size_t p = 0; p < planes; ++p) {
      std::fill(full.begin(), full.end(), fft::cplx{});
      for (std::size_t r = 0; r < H; ++r) {
        for (std::size_t c = 0; c < Wh; ++c) {
          const std::size_t gi = (p * H * Wh + r * Wh + c) * 2;
          full[r * W + c] = {g[gi], g[gi + 1]};
        }
      }
      fft::fft2(full, H, W, true);
      for (std::size_t i = 0; i < H * W; ++i) gx[p * H * W + i] += full[i].real();
    }
  });
}

Tensor irfft2(const Tensor& spectrum, std::size_t width) {
  const std::size_t rank = spectrum.rank();
  if (rank < 3 || spectrum.dim(rank - 1) != 2) {
    throw ShapeError("irfft2: expected [..., H, W/2+1, 2], got " + to_string(spectrum.shape()));
  }
  const std::size_t H = spectrum.dim(rank - 3);
  const std::size_t Wh = spectrum.dim(rank - 2);
  const std::size_t W = width;
  if (W == 0 || fft::half_width(W) != Wh) {
    throw ShapeError("irfft2: width " + std::to_string(W) + " inconsistent with " + std::to_string(Wh) + " bins");
  }
  const std::size_t planes = spectrum.numel() / (H * Wh * 2);
  Shape shape(spectrum.shape().begin(), spectrum.shape().end() - 2);
  shape.push_back(W);
  std::vector<double> out(planes * H * W);
  std::vector<fft::cplx> spec(H * Wh);
  auto sd = spectrum.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < H * Wh; ++i) spec[i] = {sd[(p * H * Wh + i) * 2], sd[(p * H * Wh + i) * 2 + 1]};
    fft::irfft2(spec, H, W, std::span<double>(out).subspan(p * H * W, H * W));
  }
  Node* sn = spectrum.node().get();
  return make_result("irfft2", std::move(shape), std::move(out), {spectrum}, [=](const std::vector<double>& g) {
    // dY[k] = weight(k2) / (H W) * rfft2(g)[k]; weight is 1 on self-conjugate
    // columns (DC, and Nyquist for even W) and 2 on the folded ones.
    auto& gs = sn->grad_buffer();
    std::vector<fft::cplx> gspec(H * Wh);
    const double norm = 1.0 / static_cast<double>(H * W);
    for (std::size_t p = 0; p < planes; ++p) {
      fft::rfft2(std::span<const double>(g).subspan(p * H * W, H * W), H, W, gspec);
      for (std::size_t r = 0; r < H; ++r) {
        for (std::size_t c = 0; c < Wh; ++c) {
          const bool self_conj = c == 0 || (W % 2 == 0 && c == W / 2);
          const double wgt = (self_conj ? 1.0 : 2.0) * norm;
          const std::size_t gi = (p * H * Wh + r * Wh + c) * 2;
          gs[gi] += wgt * gspec[r * Wh + c].real();
          gs[gi + 1] += wgt * gspec[r * Wh + c].imag();
        }
      }
    }
  });
}

Tensor complex_mul(const Tensor& a, const Tensor& b) {
  if (a.shape().back() != 2 || b.shape().back() != 2) {
    throw ShapeError("complex_mul: trailing axis must hold (re, im), got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  Shape sa(a.shape().begin(), a.shape().end() - 1);
  Shape sb(b.shape().begin(), b.shape().end() - 1);
  if (sa.empty()) sa.push_back(1);
  if (sb.empty()) sb.push_back(1);
  auto bc = std::make_shared<Broadcast>(broadcast(sa, sb, "complex_mul"));
  Shape shape = bc->out;
  shape.push_back(2);
  std::vector<double> out(numel(shape));
  auto ad = a.data();
  auto bd = b.data();
  for_each_run(*bc, [&](std::size_t o, std::size_t ia, std::size_t ib, std::size_t n, std::size_t s_a, std::size_t s_b) {
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t pa = (ia + j * s_a) * 2, pb = (ib + j * s_b) * 2, po = (o + j) * 2;
      out[po] = ad[pa] * bd[pb] - ad[pa + 1] * bd[pb + 1];
      out[po + 1] = ad[pa] * bd[pb + 1] + ad[pa + 1] * bd[pb];
    }
  });
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return make_result("complex_mul", std::move(shape), std::move(out), {a, b}, [=](const std::vector<double>& g) {
    double* ga = an->requires_grad ? an->grad_buffer().data() : nullptr;
    double* gb = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
    const auto& av = an->value;
    const auto& bv = bn->value;
    for_each_run(*bc, [&](std::size_t o, std::size_t ia, std::size_t ib, std::size_t n, std::size_t s_a,
                          std::size_t s_b) {
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t pa = (ia + j * s_a) * 2, pb = (ib + j * s_b) * 2, po = (o + j) * 2;
        const double gr = g[po], gi = g[po + 1];
        // d/da = g * conj(b), d/db = g * conj(a)
        if (ga) {
          ga[pa] += gr * bv[pb] + gi * bv[pb + 1];
          ga[pa + 1] += gi * bv[pb] - gr * bv[pb + 1];
        }
        if (gb) {
          gb[pb] += gr * av[pa] + gi * av[pa + 1];
          gb[pb + 1] += gi * av[pa] - gr * av[pa + 1];
        }
      }
    });
  });
}

}  // namespace hapnet
