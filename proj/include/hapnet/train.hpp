#pragma once

// Adam training loop, confusion-matrix evaluation, accuracy metrics and
// classification-map rendering.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hapnet/data.hpp"
#include "hapnet/model.hpp"

namespace hapnet {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch = 128;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  Precision precision = Precision::F64;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct AdamHyper {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of a single buffer; `step` is the
/// 1-based step count after incrementing.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t step, const AdamHyper& hyper);

class Adam {
 public:
  Adam(ParameterStore& store, const AdamHyper& hyper);
  /// Consumes the current grads of every parameter.
  void step();
  std::uint64_t steps() const { return t_; }

 private:
  ParameterStore& store_;
  AdamHyper hyper_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_acc = 0.0;  // running accuracy over the epoch's batches
};

/// Seeded mini-batch Adam on mean softmax cross-entropy.
std::vector<EpochLog> train(HapNet& model, const PatchSet& patches, const TrainConfig& config,
                            std::ostream* progress = nullptr);

void write_loss_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path);

/// Arg-max class ids (1-based) for every patch.
std::vector<int> predict(const HapNet& model, const PatchSet& patches, std::size_t batch = 256);

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;  // row = true class, column = predicted

  explicit ConfusionMatrix(std::size_t n = 0) : classes(n), counts(n * n, 0) {}
  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows);

  /// Class ids are 1-based.
  void add(int truth, int predicted);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * classes + predicted]; }
  std::uint64_t total() const;
};

ConfusionMatrix evaluate(const HapNet& model, const PatchSet& patches, std::size_t batch = 256);

struct MetricsReport {
  std::vector<std::optional<double>> per_class;  // nullopt for classes without support
  double overall = 0.0;
  double average = 0.0;
  double kappa = 0.0;
  double chance_agreement = 0.0;

  nlohmann::json to_json(const std::vector<std::string>& class_names = {}) const;
  /// Per-class rows, then OA, AA, Kappa, in percent.
  std::string table(const std::vector<std::string>& class_names = {}) const;
};

MetricsReport metrics(const ConfusionMatrix& cm);

// ---------------------------------------------------------------- maps

using Rgb = std::array<std::uint8_t, 3>;

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Rgb pixel(std::size_t row, std::size_t col) const;
};

std::vector<Rgb> default_palette();

/// Predicts every labeled pixel of the scene; unlabeled pixels stay black.
Image render_map(const HapNet& model, const SceneBundle& scene, const BandStats& hsi_stats, const BandStats& sar_stats,
                 const std::vector<Rgb>& palette, std::size_t batch = 256);

void write_ppm(const Image& image, const std::filesystem::path& path);

}  // namespace hapnet
