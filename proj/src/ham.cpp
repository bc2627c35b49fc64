#include "hapnet/ham.hpp"

#include <algorithm>
#include <cmath>

namespace hapnet {

void AnchoredAttentionParams::validate() const {
  if (in_dim == 0 || width == 0 || out_dim == 0) throw ConfigError("attention: dimensions must be positive");
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(width) + " is not a multiple of " + std::to_string(heads) +
                      " heads");
  }
  if (anchor_factor < 1) throw ConfigError("attention: anchor factor s must be >= 1");
}

AnchoredAttention::AnchoredAttention(ParameterStore& store, const std::string& name,
                                     const AnchoredAttentionParams& params, Rng& rng)
    : params_(params) {
  params_.validate();
  q_ = Linear(store, name + ".q", params.in_dim, params.width, rng);
  k_ = Linear(store, name + ".k", params.in_dim, params.width, rng);
  v_ = Linear(store, name + ".v", params.in_dim, params.width, rng);
  o_ = Linear(store, name + ".out", params.width, params.out_dim, rng);
}

Tensor AnchoredAttention::split_heads(const Tensor& t, std::size_t batch, std::size_t tokens) const {
  const std::size_t h = params_.heads;
  const std::size_t d = params_.head_dim();
  if (h == 1) return t;
  Tensor split = reshape(t, {batch, tokens, h, d});
  return reshape(permute(split, {0, 2, 1, 3}), {batch * h, tokens, d});
}

AttentionMaps AnchoredAttention::forward_with_maps(const Tensor& input) const {
  const bool single = input.rank() == 2;
  if (input.rank() != 2 && input.rank() != 3) {
    throw ShapeError("anchored_attention: expected tokens x features, got " + to_string(input.shape()));
  }
  const Tensor x = single ? reshape(input, {1, input.dim(0), input.dim(1)}) : input;
  const std::size_t batch = x.dim(0);
  const std::size_t tokens = x.dim(1);
  if (tokens == 0) throw ShapeError("anchored_attention: empty token sequence");
  if (x.dim(2) != params_.in_dim) {
    throw ShapeError("anchored_attention: token width " + std::to_string(x.dim(2)) + ", expected " +
                     std::to_string(params_.in_dim));
  }
  const std::size_t h = params_.heads;
  const std::size_t d = params_.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  AttentionMaps m;
  m.query = split_heads(q_(x), batch, tokens);
  m.key = split_heads(k_(x), batch, tokens);
  m.value = split_heads(v_(x), batch, tokens);
  m.anchors = avg_pool(m.query, 1, params_.anchor_factor);
  m.anchor_to_key = softmax(scale(matmul(m.anchors, m.key, Trans::No, Trans::Yes), inv_sqrt_d), 2);
  m.query_to_anchor = softmax(scale(matmul(m.query, m.anchors, Trans::No, Trans::Yes), inv_sqrt_d), 2);
  m.z = matmul(m.anchor_to_key, m.value);
  m.y = matmul(m.query_to_anchor, m.z);

  Tensor merged = m.y;
  if (h > 1) {
    merged = reshape(permute(reshape(m.y, {batch, h, tokens, d}), {0, 2, 1, 3}), {batch, tokens, h * d});
  }
  Tensor out = o_(merged);
  m.output = single ? reshape(out, {tokens, params_.out_dim}) : out;
  return m;
}

void HamConfig::validate() const {
  if (!use_global && !use_spectral && !use_local) throw ConfigError("HAM: at least one branch must be enabled");
  if (expansion < 1) throw ConfigError("HAM: expansion ratio must be >= 1");
  if (local_kernel % 2 == 0) throw ConfigError("HAM: local kernel size must be odd");
  if (reduction < 1) throw ConfigError("HAM: channel-attention reduction must be >= 1");
  if (heads < 1) throw ConfigError("HAM: heads must be >= 1");
  if (spatial_anchor < 1 || spectral_anchor < 1) throw ConfigError("HAM: anchor factors must be >= 1");
  if (spectral_width == 0 || spectral_width % heads != 0) {
    throw ConfigError("HAM: spectral width must be a positive multiple of heads");
  }
}

GlobalBranch::GlobalBranch(ParameterStore& store, const std::string& name, std::size_t channels,
                           const HamConfig& cfg, Rng& rng)
    : attn_(store, name + ".attn", {channels, channels, channels, cfg.heads, cfg.spatial_anchor}, rng) {}

Tensor GlobalBranch::operator()(const Tensor& x) const {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor tokens = permute(reshape(x, {B, C, H * W}), {0, 2, 1});
  Tensor y = attn_.forward(tokens);
  return reshape(permute(y, {0, 2, 1}), {B, C, H, W});
}

SpectralBranch::SpectralBranch(ParameterStore& store, const std::string& name, std::size_t height,
                               std::size_t width, const HamConfig& cfg, Rng& rng)
    : attn_(store, name + ".attn",
            {height * width, cfg.spectral_width, height * width, cfg.heads, cfg.spectral_anchor}, rng) {}

Tensor SpectralBranch::operator()(const Tensor& x) const {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor y = attn_.forward(reshape(x, {B, C, H * W}));
  return reshape(y, {B, C, H, W});
}

LocalBranch::LocalBranch(ParameterStore& store, const std::string& name, std::size_t channels,
                         const HamConfig& cfg, Rng& rng) {
  const std::size_t k = cfg.local_kernel;
  const double stddev = std::sqrt(2.0 / static_cast<double>(k * k));
  kernel1 = store.add(name + ".dw1.weight", normal_init({channels, k, k}, stddev, rng));
  bias1 = store.add(name + ".dw1.bias", Tensor::zeros({channels}));
  kernel2 = store.add(name + ".dw2.weight", normal_init({channels, k, k}, stddev, rng));
  bias2 = store.add(name + ".dw2.bias", Tensor::zeros({channels}));
  const std::size_t reduced = std::max<std::size_t>(1, channels / cfg.reduction);
  squeeze = Linear(store, name + ".se.squeeze", channels, reduced, rng);
  excite = Linear(store, name + ".se.excite", reduced, channels, rng);
}

LocalOutput LocalBranch::forward(const Tensor& x, const std::optional<Tensor>& gate_override) const {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor y = relu(add(depthwise_conv2d(x, kernel1), reshape(bias1, {C, 1, 1})));
  y = add(depthwise_conv2d(y, kernel2), reshape(bias2, {C, 1, 1}));
  LocalOutput out;
  if (gate_override) {
    out.gate = *gate_override;
  } else {
    Tensor pooled = mean_axis(reshape(y, {B, C, H * W}), 2);
    out.gate = sigmoid(excite(relu(squeeze(pooled))));
  }
  out.output = mul(y, reshape(out.gate, {B, C, 1, 1}));
  return out;
}

HamBlock::HamBlock(ParameterStore& store, const std::string& name, std::size_t channels, std::size_t height,
                   std::size_t width, const HamConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  cfg.validate();
  norm1_ = ChannelNorm(store, name + ".norm1", channels);
  if (cfg.use_global) global_.emplace(store, name + ".global", channels, cfg, rng);
  if (cfg.use_spectral) spectral_.emplace(store, name + ".spectral", height, width, cfg, rng);
  if (cfg.use_local) local_.emplace(store, name + ".local", channels, cfg, rng);
  norm2_ = ChannelNorm(store, name + ".norm2", channels);
  ffn_in_ = Conv2d(store, name + ".ffn.in", channels, channels * cfg.expansion, 1, rng, 0.02);
  ffn_out_ = Conv2d(store, name + ".ffn.out", channels * cfg.expansion, channels, 1, rng, 0.02);
}

Tensor HamBlock::operator()(const Tensor& x) const {
  if (x.rank() != 4) throw ShapeError("HAM: expected B x C x H x W, got " + to_string(x.shape()));
  const Tensor n = norm1_(x);
  Tensor y = x;
  if (global_) y = add(y, (*global_)(n));
  if (spectral_) y = add(y, (*spectral_)(n));
  if (local_) y = add(y, (*local_)(n));
  return add(y, ffn_out_(gelu(ffn_in_(norm2_(y)))));
}

}  // namespace hapnet
