#pragma once

// Scene bundles on disk, PCA band reduction, train-split normalization,
// patch extraction, and a separable synthetic scene generator.
//
// Bundle directory layout (all binary data little-endian):
//   hsi.json / hsi.bin     {"width","height","bands","modality":"HSI","dtype":"float32"}
//                          + band-major float32 raster (band, row, col)
//   sar.json / sar.bin     same layout, "modality":"SAR"
//   labels.json / labels.bin {"width","height","classes":[names...]}
//                          + row-major uint16 raster, 0 = unlabeled
//   train.csv / test.csv   header "row,col", one labeled pixel per line

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hapnet/tensor.hpp"

namespace hapnet {

enum class Modality { HSI, SAR };

std::string to_string(Modality m);
Modality parse_modality(const std::string& text);

struct SceneCube {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t bands = 0;
  Modality modality = Modality::HSI;
  std::vector<double> values;  // band-major: (band * height + row) * width + col

  std::size_t pixels() const { return width * height; }
  double at(std::size_t band, std::size_t row, std::size_t col) const {
    return values[(band * height + row) * width + col];
  }
  void validate() const;
};

struct LabelRaster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint16_t> labels;  // row-major
  std::vector<std::string> class_names;

  std::size_t classes() const { return class_names.size(); }
  std::uint16_t at(std::size_t row, std::size_t col) const { return labels[row * width + col]; }
  void validate() const;
};

struct PixelCoord {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
  friend auto operator<=>(const PixelCoord&, const PixelCoord&) = default;
};

struct SceneBundle {
  SceneCube hsi;
  SceneCube sar;
  LabelRaster labels;
  std::vector<PixelCoord> train;
  std::vector<PixelCoord> test;

  void validate() const;
};

void save_scene(const SceneBundle& bundle, const std::filesystem::path& dir);
SceneBundle load_scene(const std::filesystem::path& dir);

// ---------------------------------------------------------------- PCA

struct PcaModel {
  std::size_t bands = 0;
  std::size_t components = 0;
  std::vector<double> means;               // per band
  std::vector<double> basis;               // bands x components, column j = component j
  std::vector<double> explained_variance;  // non-increasing

  double component(std::size_t band, std::size_t j) const { return basis[band * components + j]; }
};

/// Pixels are samples, bands are variables; population covariance.
/// Each component's largest-magnitude entry is made positive.
PcaModel fit_pca(const SceneCube& cube, std::size_t k = 30);
SceneCube apply_pca(const SceneCube& cube, const PcaModel& model);

nlohmann::json pca_to_json(const PcaModel& model);

// ------------------------------------------------------ normalization

struct BandStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Per-band mean and (population) standard deviation over the given
/// pixels only. Zero deviations are replaced by 1.
BandStats fit_band_stats(const SceneCube& cube, std::span<const PixelCoord> pixels);

// ------------------------------------------------------------ patches

struct PatchSet {
  Tensor hsi;               // B x C_hsi x P x P
  Tensor sar;               // B x C_sar x P x P
  std::vector<int> labels;  // 1..N
  std::vector<PixelCoord> coords;

  std::size_t size() const { return labels.size(); }
  /// Rows `indices` as a new PatchSet (no graph history).
  PatchSet select(std::span<const std::size_t> indices) const;
};

/// size x size windows centered on each coordinate with reflect padding at
/// the scene border, each band standardized with the given statistics.
PatchSet extract_patches(const SceneCube& hsi, const SceneCube& sar, const LabelRaster& labels,
                         std::span<const PixelCoord> coords, std::size_t size, const BandStats& hsi_stats,
                         const BandStats& sar_stats);

/// Unnormalized window of one cube; values[(band * size + u) * size + v].
std::vector<double> extract_window(const SceneCube& cube, PixelCoord center, std::size_t size);

// ---------------------------------------------------------- synthetic

struct SyntheticSpec {
  std::uint64_t seed = 1;
  std::size_t classes = 7;
  std::size_t width = 128;
  std::size_t height = 128;
  std::size_t hsi_bands = 48;
  std::size_t sar_bands = 4;
  std::size_t block = 32;  // side of the square class regions
  std::size_t train_per_class = 30;
  std::size_t test_per_class = 100;
};

struct SyntheticScene {
  SceneBundle bundle;
  std::vector<std::vector<double>> hsi_signatures;  // per class, length hsi_bands
  std::vector<std::vector<double>> sar_means;       // per class, length sar_bands
};

SyntheticScene make_synthetic_scene(const SyntheticSpec& spec);

}  // namespace hapnet
