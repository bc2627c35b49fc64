#pragma once

// Hierarchical attention: global (spatial) and spectral anchored attention,
// a depth-wise convolutional local branch with channel attention, and a
// position-wise FFN.

#include <cstddef>
#include <optional>
#include <string>

#include "hapnet/nn.hpp"

namespace hapnet {

struct AnchoredAttentionParams {
  std::size_t in_dim = 0;   // token feature width entering the projections
  std::size_t width = 0;    // d_model = heads * d
  std::size_t out_dim = 0;  // token feature width after the output projection
  std::size_t heads = 1;
  std::size_t anchor_factor = 2;  // s

  std::size_t head_dim() const { return width / heads; }
  std::size_t anchors(std::size_t tokens) const { return (tokens + anchor_factor - 1) / anchor_factor; }
  void validate() const;
};

/// Intermediates of one forward pass; per-head tensors are stacked along
/// axis 0 as (batch * heads).
struct AttentionMaps {
  Tensor query;            // Q   [BH x tokens x d]
  Tensor key;              // K   [BH x tokens x d]
  Tensor value;            // V   [BH x tokens x d]
  Tensor anchors;          // A   [BH x anchors x d]
  Tensor anchor_to_key;    // M_d [BH x anchors x tokens]
  Tensor query_to_anchor;  // M_e [BH x tokens x anchors]
  Tensor z;                // M_d V [BH x anchors x d]
  Tensor y;                // M_e Z [BH x tokens x d]
  Tensor output;           // projected, heads merged [B x tokens x out_dim]
};

class AnchoredAttention {
 public:
  AnchoredAttention() = default;
  AnchoredAttention(ParameterStore& store, const std::string& name, const AnchoredAttentionParams& params, Rng& rng);

  /// x is tokens x in_dim or B x tokens x in_dim.
  Tensor forward(const Tensor& x) const { return forward_with_maps(x).output; }
  AttentionMaps forward_with_maps(const Tensor& x) const;

  const AnchoredAttentionParams& params() const { return params_; }
  const Linear& query_proj() const { return q_; }
  const Linear& key_proj() const { return k_; }
  const Linear& value_proj() const { return v_; }
  const Linear& out_proj() const { return o_; }

 private:
  Tensor split_heads(const Tensor& t, std::size_t batch, std::size_t tokens) const;

  AnchoredAttentionParams params_;
  Linear q_, k_, v_, o_;
};

struct HamConfig {
  bool use_global = true;
  bool use_spectral = true;
  bool use_local = true;
  std::size_t expansion = 2;
  std::size_t local_kernel = 3;
  std::size_t reduction = 4;
  std::size_t heads = 2;
  std::size_t spatial_anchor = 2;
  std::size_t spectral_anchor = 2;
  std::size_t spectral_width = 32;

  void validate() const;
};

/// Attention over the H*W spatial tokens, C features each.
class GlobalBranch {
 public:
  GlobalBranch() = default;
  GlobalBranch(ParameterStore& store, const std::string& name, std::size_t channels, const HamConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  const AnchoredAttention& attention() const { return attn_; }

 private:
  AnchoredAttention attn_;
};

/// Attention over the C spectral tokens; each token's H*W values are
/// projected to the attention width and back.
class SpectralBranch {
 public:
  SpectralBranch() = default;
  SpectralBranch(ParameterStore& store, const std::string& name, std::size_t height, std::size_t width,
                 const HamConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  const AnchoredAttention& attention() const { return attn_; }

 private:
  AnchoredAttention attn_;
};

struct LocalOutput {
  Tensor output;
  Tensor gate;  // B x C, in (0, 1)
};

/// dwconv -> ReLU -> dwconv -> squeeze-excitation gate.
class LocalBranch {
 public:
  LocalBranch() = default;
  LocalBranch(ParameterStore& store, const std::string& name, std::size_t channels, const HamConfig& cfg, Rng& rng);

  /// A supplied gate (B x C) replaces the learned channel attention.
  LocalOutput forward(const Tensor& x, const std::optional<Tensor>& gate_override = std::nullopt) const;
  Tensor operator()(const Tensor& x) const { return forward(x).output; }

  Tensor kernel1, bias1, kernel2, bias2;
  Linear squeeze, excite;
};

/// y = x + sum(branches(norm(x))); out = y + FFN(norm(y)).
class HamBlock {
 public:
  HamBlock() = default;
  HamBlock(ParameterStore& store, const std::string& name, std::size_t channels, std::size_t height,
           std::size_t width, const HamConfig& cfg, Rng& rng);

  /// x is B x C x H x W.
  Tensor operator()(const Tensor& x) const;

  const HamConfig& config() const { return cfg_; }
  const std::optional<GlobalBranch>& global() const { return global_; }
  const std::optional<SpectralBranch>& spectral() const { return spectral_; }
  const std::optional<LocalBranch>& local() const { return local_; }

 private:
  HamConfig cfg_;
  ChannelNorm norm1_, norm2_;
  std::optional<GlobalBranch> global_;
  std::optional<SpectralBranch> spectral_;
  std::optional<LocalBranch> local_;
  Conv2d ffn_in_, ffn_out_;
};

}  // namespace hapnet
