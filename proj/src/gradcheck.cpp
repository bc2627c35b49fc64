#include "hapnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hapnet/error.hpp"
#include "hapnet/ham.hpp"
#include "hapnet/model.hpp"
#include "hapnet/ops.hpp"
#include "hapnet/pffm.hpp"
#include "hapnet/random.hpp"

namespace hapnet {

namespace {
// Gradients that vanish analytically (e.g. a key bias under softmax) leave
// only finite-difference noise; the floor keeps them from reading as 100%.
constexpr double kGradientFloor = 1e-6;
}  // namespace

GradCheckResult check_gradients(const std::string& name, std::vector<Tensor> leaves,
                                const std::function<Tensor()>& loss, const GradCheckOptions& options) {
  GradCheckResult result;
  result.name = name;
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  loss().backward();

  Rng rng(options.seed);
  for (auto& leaf : leaves) {
    const std::size_t n = leaf.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords > 0 && options.max_coords < n) {
      rng.shuffle(coords);
      coords.resize(options.max_coords);
    }
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    double diff2 = 0.0, ad2 = 0.0, fd2 = 0.0;
    for (std::size_t c : coords) {
      auto values = leaf.mutable_data();
      const double original = values[c];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        values[c] = original + options.epsilon;
        plus = loss().item();
        values[c] = original - options.epsilon;
        minus = loss().item();
      }
      values[c] = original;
      const double numeric = (plus - minus) / (2.0 * options.epsilon);
      diff2 += (analytic[c] - numeric) * (analytic[c] - numeric);
      ad2 += analytic[c] * analytic[c];
      fd2 += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(std::max(ad2, fd2)), kGradientFloor);
    const double err = std::sqrt(diff2) / denom;
    result.max_relative_error = std::max(result.max_relative_error, err);
    result.coords_checked += coords.size();
  }
  result.passed = std::isfinite(result.max_relative_error) && result.max_relative_error <= options.tolerance;
  return result;
}

Tensor random_projection(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> r(out.numel());
  for (auto& v : r) v = rng.uniform(-1.0, 1.0);
  return sum(mul(out, Tensor::from(out.shape(), std::move(r))));
}

namespace {

Tensor random_leaf(Shape shape, Rng& rng, double sd = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Three shape draws per op, small enough to probe every coordinate.
std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

void tensor_suite(std::uint64_t seed, std::vector<GradCheckResult>& out) {
  Rng rng(seed);
  GradCheckOptions opt;
  opt.seed = seed;
  auto run = [&](const std::string& name, std::vector<Tensor> leaves, const std::function<Tensor()>& f) {
    out.push_back(check_gradients(name, std::move(leaves), f, opt));
  };
  for (int trial = 0; trial < 3; ++trial) {
    const std::string tag = "#" + std::to_string(trial + 1);
    const std::uint64_t ps = seed * 131 + static_cast<std::uint64_t>(trial);
    const std::size_t m = pick(rng, 2, 5), k = pick(rng, 2, 5), n = pick(rng, 2, 5), b = pick(rng, 2, 3);

    {
      Tensor a = random_leaf({m, k}, rng), w = random_leaf({k, n}, rng);
      run("matmul " + tag, {a, w}, [=] { return random_projection(matmul(a, w), ps); });
      Tensor a3 = random_leaf({b, k, m}, rng), w3 = random_leaf({b, n, k}, rng);
      run("matmul_batched_trans " + tag, {a3, w3},
          [=] { return random_projection(matmul(a3, w3, Trans::Yes, Trans::Yes), ps); });
      Tensor w2 = random_leaf({k, n}, rng);
      Tensor a4 = random_leaf({b, m, k}, rng);
      run("matmul_broadcast " + tag, {a4, w2}, [=] { return random_projection(matmul(a4, w2), ps); });
    }
    {
      Tensor x = random_leaf({b, m, n}, rng), y = random_leaf({m, 1}, rng);
      run("add " + tag, {x, y}, [=] { return random_projection(add(x, y), ps); });
      run("sub " + tag, {x, y}, [=] { return random_projection(sub(x, y), ps); });
      run("mul " + tag, {x, y}, [=] { return random_projection(mul(x, y), ps); });
      run("scale " + tag, {x}, [=] { return random_projection(add_scalar(scale(x, 1.7), 0.3), ps); });
    }
    {
      Tensor x = random_leaf({b, m, n}, rng);
      run("relu " + tag, {x}, [=] { return random_projection(relu(x), ps); });
      run("gelu " + tag, {x}, [=] { return random_projection(gelu(x), ps); });
      run("sigmoid " + tag, {x}, [=] { return random_projection(sigmoid(x), ps); });
      const std::size_t axis = static_cast<std::size_t>(trial % 3);
      run("softmax " + tag, {x}, [=] { return random_projection(softmax(x, axis), ps); });
      run("mean_axis " + tag, {x}, [=] { return random_projection(mean_axis(x, axis), ps); });
      run("sum_mean " + tag, {x}, [=] { return add(scale(sum(mul(x, x)), 0.1), mean(x)); });
      run("reshape_permute " + tag, {x}, [=] {
        return random_projection(reshape(permute(x, {2, 0, 1}), {n, b * m}), ps);
      });
      Tensor g = random_leaf({m}, rng), be = random_leaf({m}, rng);
      run("layer_norm " + tag, {x, g, be}, [=] { return random_projection(layer_norm(x, 1, g, be), ps); });
      const std::size_t f = pick(rng, 2, 3);
      run("avg_pool " + tag, {x}, [=] { return random_projection(avg_pool(x, 1, f), ps); });
      Tensor y = random_leaf({b, 2, n}, rng);
      run("concat " + tag, {x, y}, [=] { return random_projection(concat({x, y}, 1), ps); });
    }
    {
      Tensor x = random_leaf({b, m, k}, rng), w = random_leaf({n, k}, rng), bias = random_leaf({n}, rng);
      run("linear " + tag, {x, w, bias}, [=] { return random_projection(linear(x, w, bias), ps); });
    }
    {
      const std::size_t c = pick(rng, 1, 3), h = pick(rng, 3, 6), wd = pick(rng, 3, 6);
      Tensor x = random_leaf({b, c, h, wd}, rng), ker = random_leaf({c, 3, 3}, rng);
      run("depthwise_conv2d " + tag, {x, ker}, [=] { return random_projection(depthwise_conv2d(x, ker), ps); });
      const std::size_t co = pick(rng, 1, 3);
      const std::size_t kk = trial == 2 ? 1 : 3;
      Tensor cw = random_leaf({co, c, kk, kk}, rng);
      run("conv2d " + tag, {x, cw}, [=] { return random_projection(conv2d(x, cw), ps); });
      run("rfft2 " + tag, {x}, [=] { return random_projection(rfft2(x), ps); });
      Tensor spec = random_leaf({c, h, wd / 2 + 1, 2}, rng);
      run("irfft2 " + tag, {spec}, [=] { return random_projection(irfft2(spec, wd), ps); });
      Tensor za = random_leaf({c, h, wd / 2 + 1, 2}, rng), zb = random_leaf({h, wd / 2 + 1, 2}, rng);
      run("complex_mul " + tag, {za, zb}, [=] { return random_projection(complex_mul(za, zb), ps); });
    }
    {
      const std::size_t classes = pick(rng, 2, 5);
      Tensor logits = random_leaf({b + 1, classes}, rng);
      std::vector<int> labels(b + 1);
      for (auto& l : labels) l = static_cast<int>(rng.index(classes));
      run("cross_entropy " + tag, {logits}, [=] { return cross_entropy(logits, labels); });
    }
  }
}

void ham_suite(std::uint64_t seed, std::vector<GradCheckResult>& out) {
  Rng rng(seed);
  ParameterStore store;
  HamConfig cfg;
  cfg.spectral_width = 8;
  HamBlock block(store, "ham", 4, 5, 5, cfg, rng);
  // Perturb the zero biases and unit norms so every path carries signal.
  for (auto& e : store.entries()) {
    for (auto& v : e.tensor.mutable_data()) v += rng.normal(0.0, 0.1);
  }
  // Keep the single squeeze unit out of the ReLU dead zone.
  Tensor squeeze_bias = block.local()->squeeze.bias;
  for (auto& v : squeeze_bias.mutable_data()) v = 0.5;
  Tensor x = random_leaf({2, 4, 5, 5}, rng);
  std::vector<Tensor> leaves{x};
  for (auto& e : store.entries()) leaves.push_back(e.tensor);
  GradCheckOptions opt;
  opt.seed = seed;
  opt.tolerance = 1e-4;
  out.push_back(check_gradients("ham block 4x5x5", leaves, [&] { return random_projection(block(x), seed + 7); }, opt));

  AnchoredAttentionParams p{6, 8, 6, 2, 3};
  ParameterStore astore;
  AnchoredAttention attn(astore, "attn", p, rng);
  Tensor t = random_leaf({2, 7, 6}, rng);
  std::vector<Tensor> aleaves{t};
  for (auto& e : astore.entries()) aleaves.push_back(e.tensor);
  out.push_back(
      check_gradients("anchored attention", aleaves, [&] { return random_projection(attn.forward(t), seed + 8); }, opt));
}

void pffm_suite(std::uint64_t seed, std::vector<GradCheckResult>& out) {
  Rng rng(seed);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t c = 1 + rng.index(3), h = 3 + rng.index(4), w = 3 + rng.index(4);
    ParameterStore store;
    GlobalFilter filter(store, "pffm", c, h, w);
    for (auto& v : filter.weights().mutable_data()) v += rng.normal(0.0, 0.3);
    Tensor fh = random_leaf({2, c, h, w}, rng), fs = random_leaf({2, c, h, w}, rng);
    GradCheckOptions opt;
    opt.seed = seed;
    out.push_back(check_gradients("pffm fuse #" + std::to_string(trial + 1), {fh, fs, filter.weights()},
                                  [&] { return random_projection(pffm_fuse(fh, fs, filter), seed + trial); }, opt));
  }
}

void model_suite(std::uint64_t seed, std::vector<GradCheckResult>& out) {
  ModelConfig cfg;
  cfg.hsi_channels = 5;
  cfg.sar_channels = 2;
  cfg.patch = 7;
  cfg.widths = {4, 8, 16};
  cfg.classes = 3;
  cfg.hidden = 16;
  cfg.ham.spectral_width = 8;
  HapNet model(cfg, seed);
  Rng rng(seed + 1);
  for (auto& e : model.parameters().entries()) {
    for (auto& v : e.tensor.mutable_data()) v += rng.normal(0.0, 0.05);
  }
  Tensor hsi = random_leaf({2, cfg.hsi_channels, 7, 7}, rng);
  Tensor sar = random_leaf({2, cfg.sar_channels, 7, 7}, rng);
  const std::vector<int> labels{0, 2};
  std::vector<Tensor> leaves{hsi, sar};
  for (auto& e : model.parameters().entries()) leaves.push_back(e.tensor);
  GradCheckOptions opt;
  opt.seed = seed;
  opt.tolerance = 1e-3;
  opt.max_coords = 6;
  out.push_back(check_gradients("model end-to-end", leaves,
                                [&] { return cross_entropy(model.forward(hsi, sar), labels); }, opt));
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(const std::string& component, std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  const bool all = component == "all";
  if (!all && component != "tensor" && component != "ham" && component != "pffm" && component != "model") {
    throw ConfigError("gradcheck: unknown component '" + component + "'");
  }
  if (all || component == "tensor") tensor_suite(seed, out);
  if (all || component == "ham") ham_suite(seed, out);
  if (all || component == "pffm") pffm_suite(seed, out);
  if (all || component == "model") model_suite(seed, out);
  return out;
}

}  // namespace hapnet
