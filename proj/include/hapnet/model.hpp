#pragma once

// The dual-encoder classifier: HSI encoder of three HAM stages, SAR encoder
// of three conv layers, per-level fusion, and a two-layer FC head.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "hapnet/ham.hpp"
#include "hapnet/pffm.hpp"

namespace hapnet {

struct ModelConfig {
  std::size_t hsi_channels = 30;
  std::size_t sar_channels = 4;
  std::size_t patch = 11;
  std::array<std::size_t, 3> widths{32, 64, 128};
  std::size_t classes = 7;
  std::size_t hidden = 256;
  bool use_ham = true;
  bool use_pffm = true;
  HamConfig ham;

  void validate() const;
};

void to_json(nlohmann::json& j, const HamConfig& c);
void from_json(const nlohmann::json& j, HamConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
/// Rejects unknown keys; absent keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

/// FNV-1a over the canonical JSON of the config.
std::uint64_t config_hash(const ModelConfig& config);

class HapNet {
 public:
  HapNet(const ModelConfig& config, std::uint64_t seed);
  HapNet(const HapNet&) = delete;
  HapNet& operator=(const HapNet&) = delete;

  /// hsi: B x hsi_channels x P x P, sar: B x sar_channels x P x P -> B x classes.
  Tensor forward(const Tensor& hsi, const Tensor& sar) const;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const std::vector<GlobalFilter>& filters() const { return filters_; }
  const std::vector<HamBlock>& ham_blocks() const { return ham_; }

 private:
  ModelConfig config_;
  ParameterStore store_;
  Conv2d stem_;
  std::vector<HamBlock> ham_;           // use_ham
  std::vector<Conv2d> plain_;           // !use_ham: 3x3 conv blocks
  std::vector<ChannelNorm> plain_norm_;
  std::vector<Conv2d> transitions_;     // width-doubling 1x1 convs
  std::vector<Conv2d> sar_conv_;
  std::vector<ChannelNorm> sar_norm_;
  std::vector<GlobalFilter> filters_;   // use_pffm
  Linear fc1_, fc2_;
};

// ------------------------------------------------------------- FLOPs

struct FlopItem {
  std::string block;     // e.g. "ham.global.projections"
  std::size_t level;     // 1..3, 0 for the head/stem
  std::string category;  // "attention", "conv", "linear", "fft"
  double flops;
};

struct FlopReport {
  std::vector<FlopItem> items;
  double total() const;
  double category(const std::string& name) const;
  double level(std::size_t level) const;
};

/// 2 flops per multiply-accumulate over every linear, conv, attention
/// product; 5 N log2 N per FFT of N points. Elementwise work is ignored.
FlopReport count_flops(const ModelConfig& config);

double linear_flops(std::size_t in, std::size_t out, std::size_t tokens = 1);
double conv_flops(std::size_t in, std::size_t out, std::size_t kernel, std::size_t pixels);
/// Score and value products of anchored attention across heads.
double anchored_attention_flops(std::size_t tokens, std::size_t width, std::size_t anchor_factor);
/// Score and value products of dense softmax attention.
double dense_attention_flops(std::size_t tokens, std::size_t width);
double fft_flops(std::size_t points);

// -------------------------------------------------------- checkpoints

enum class Precision { F64, F32 };

Precision parse_precision(const std::string& text);
std::string to_string(Precision p);

/// Rounds every parameter to the nearest float (32-bit storage mode).
void round_parameters_to_f32(ParameterStore& store);

/// Layout (little-endian): "HAPNETCK", u32 version, u64 config hash,
/// u32 bytes per value, u32 parameter count, then per parameter: u32 name
/// length, name bytes, u32 rank, u64 dims[rank], values.
void save_checkpoint(const HapNet& model, const std::filesystem::path& path, Precision precision = Precision::F64);
void load_checkpoint(HapNet& model, const std::filesystem::path& path);
std::uint64_t checkpoint_size(const HapNet& model, Precision precision);

}  // namespace hapnet
