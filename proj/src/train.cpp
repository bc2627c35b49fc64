#include "hapnet/train.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "hapnet/ops.hpp"
#include "hapnet/random.hpp"

namespace hapnet {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch < 1) throw ConfigError("train: batch size must be >= 1");
  if (!(lr >= 0.0)) throw ConfigError("train: learning rate must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: Adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train: Adam epsilon must be positive");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs}, {"batch", c.batch}, {"lr", c.lr},     {"beta1", c.beta1},
           {"beta2", c.beta2},   {"eps", c.eps},     {"seed", c.seed}, {"precision", to_string(c.precision)}};
}

void from_json(const json& j, TrainConfig& c) {
  static const std::set<std::string> allowed{"epochs", "batch", "lr", "beta1", "beta2", "eps", "seed", "precision"};
  if (!j.is_object()) throw ConfigError("train: expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("train: unknown key '" + key + "'");
  }
  try {
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("batch")) c.batch = j.at("batch").get<std::size_t>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("beta1")) c.beta1 = j.at("beta1").get<double>();
    if (j.contains("beta2")) c.beta2 = j.at("beta2").get<double>();
    if (j.contains("eps")) c.eps = j.at("eps").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("precision")) c.precision = parse_precision(j.at("precision").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
}

// ---------------------------------------------------------------- Adam

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t step, const AdamHyper& h) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adam: state does not match parameter shape");
  }
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    param[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

Adam::Adam(ParameterStore& store, const AdamHyper& hyper) : store_(store), hyper_(hyper) {
  for (const auto& e : store_.entries()) {
    m_.emplace_back(e.tensor.numel(), 0.0);
    v_.emplace_back(e.tensor.numel(), 0.0);
  }
}

void Adam::step() {
  auto& entries = store_.entries();
  if (entries.size() != m_.size()) throw ShapeError("adam: parameter set changed after construction");
  ++t_;
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& t = entries[p].tensor;
    adam_update(t.mutable_data(), t.grad(), m_[p], v_[p], t_, hyper_);
  }
}

// --------------------------------------------------------------- train

namespace {

int argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = c;
  }
  return static_cast<int>(best);
}

}  // namespace

std::vector<EpochLog> train(HapNet& model, const PatchSet& patches, const TrainConfig& config, std::ostream* progress) {
  config.validate();
  if (patches.size() == 0) throw DataError("train: empty patch set");
  const std::size_t classes = model.config().classes;
  for (int label : patches.labels) {
    if (label < 1 || static_cast<std::size_t>(label) > classes) {
      throw DataError("train: label " + std::to_string(label) + " outside 1.." + std::to_string(classes));
    }
  }
  auto& store = model.parameters();
  if (config.precision == Precision::F32) round_parameters_to_f32(store);
  Adam adam(store, {config.lr, config.beta1, config.beta2, config.eps});
  Rng rng(config.seed);
  std::vector<std::size_t> order(patches.size());
  std::vector<EpochLog> log;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t end = std::min(order.size(), start + config.batch);
      const PatchSet batch = patches.select(std::span<const std::size_t>(order).subspan(start, end - start));
      std::vector<int> targets(batch.labels.size());
      for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = batch.labels[i] - 1;

      store.zero_grad();
      const Tensor logits = model.forward(batch.hsi, batch.sar);
      const Tensor loss = cross_entropy(logits, targets);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                           std::to_string(start));
      }
      loss.backward();
      adam.step();
      if (config.precision == Precision::F32) round_parameters_to_f32(store);

      loss_sum += value * static_cast<double>(targets.size());
      const auto ld = logits.data();
      for (std::size_t i = 0; i < targets.size(); ++i) {
        if (argmax_row(ld.subspan(i * classes, classes)) == targets[i]) ++correct;
      }
    }
    const double n = static_cast<double>(patches.size());
    log.push_back({epoch, loss_sum / n, static_cast<double>(correct) / n});
    if (progress) {
      *progress << "epoch " << epoch << " loss " << std::setprecision(6) << log.back().mean_loss << " train_acc "
                << log.back().train_acc << '\n';
    }
  }
  return log;
}

void write_loss_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << "epoch,mean_loss,train_acc\n";
  os << std::setprecision(17);
  for (const auto& e : log) os << e.epoch << ',' << e.mean_loss << ',' << e.train_acc << '\n';
}

// ---------------------------------------------------------- evaluation

std::vector<int> predict(const HapNet& model, const PatchSet& patches, std::size_t batch) {
  NoGradGuard no_grad;
  const std::size_t classes = model.config().classes;
  std::vector<int> out;
  out.reserve(patches.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < patches.size(); start += batch) {
    const std::size_t end = std::min(patches.size(), start + batch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const PatchSet b = patches.select(idx);
    const Tensor logits = model.forward(b.hsi, b.sar);
    for (std::size_t i = 0; i < idx.size(); ++i) out.push_back(argmax_row(logits.data().subspan(i * classes, classes)) + 1);
  }
  return out;
}

ConfusionMatrix ConfusionMatrix::from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
  ConfusionMatrix cm(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows.size()) throw ShapeError("confusion matrix must be square");
    for (std::size_t c = 0; c < rows.size(); ++c) cm.counts[r * cm.classes + c] = rows[r][c];
  }
  return cm;
}

void ConfusionMatrix::add(int truth, int predicted) {
  if (truth < 1 || predicted < 1 || static_cast<std::size_t>(truth) > classes ||
      static_cast<std::size_t>(predicted) > classes) {
    throw ShapeError("confusion matrix: class id out of range");
  }
  ++counts[static_cast<std::size_t>(truth - 1) * classes + static_cast<std::size_t>(predicted - 1)];
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

ConfusionMatrix evaluate(const HapNet& model, const PatchSet& patches, std::size_t batch) {
  ConfusionMatrix cm(model.config().classes);
  const auto pred = predict(model, patches, batch);
  for (std::size_t i = 0; i < pred.size(); ++i) cm.add(patches.labels[i], pred[i]);
  return cm;
}

MetricsReport metrics(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw DataError("metrics: confusion matrix is empty");
  const std::size_t n = cm.classes;
  const double t = static_cast<double>(total);
  MetricsReport r;
  std::uint64_t trace = 0;
  double pe = 0.0;
  double aa_sum = 0.0;
  std::size_t aa_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row += cm.at(i, j);
      col += cm.at(j, i);
    }
    trace += cm.at(i, i);
    pe += static_cast<double>(row) * static_cast<double>(col);
    if (row == 0) {
      r.per_class.push_back(std::nullopt);
    } else {
      const double acc = static_cast<double>(cm.at(i, i)) / static_cast<double>(row);
      r.per_class.push_back(acc);
      aa_sum += acc;
      ++aa_count;
    }
  }
  r.overall = static_cast<double>(trace) / t;
  r.average = aa_sum / static_cast<double>(aa_count);
  r.chance_agreement = pe / (t * t);
  r.kappa = r.chance_agreement == 1.0 ? 1.0 : (r.overall - r.chance_agreement) / (1.0 - r.chance_agreement);
  return r;
}

json MetricsReport::to_json(const std::vector<std::string>& class_names) const {
  json classes = json::array();
  for (std::size_t i = 0; i < per_class.size(); ++i) {
    const std::string name = i < class_names.size() ? class_names[i] : "class_" + std::to_string(i + 1);
    classes.push_back({{"class", name}, {"accuracy", per_class[i] ? json(*per_class[i]) : json(nullptr)}});
  }
  return json{{"per_class", classes}, {"OA", overall}, {"AA", average}, {"Kappa", kappa}};
}

std::string MetricsReport::table(const std::vector<std::string>& class_names) const {
  std::size_t wname = 5;
  for (std::size_t i = 0; i < per_class.size(); ++i) {
    const std::string name = i < class_names.size() ? class_names[i] : "class_" + std::to_string(i + 1);
    wname = std::max(wname, name.size());
  }
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << std::left << std::setw(static_cast<int>(wname)) << "Class" << "  " << std::right << std::setw(8) << "Acc(%)" << '\n';
  for (std::size_t i = 0; i < per_class.size(); ++i) {
    const std::string name = i < class_names.size() ? class_names[i] : "class_" + std::to_string(i + 1);
    os << std::left << std::setw(static_cast<int>(wname)) << name << "  " << std::right << std::setw(8);
    if (per_class[i]) {
      os << 100.0 * *per_class[i];
    } else {
      os << "n/a";
    }
    os << '\n';
  }
  const std::pair<const char*, double> summary[] = {{"OA", overall}, {"AA", average}, {"Kappa", kappa}};
  for (const auto& [label, value] : summary) {
    os << std::left << std::setw(static_cast<int>(wname)) << label << "  " << std::right << std::setw(8) << 100.0 * value
       << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------- maps

Rgb Image::pixel(std::size_t row, std::size_t col) const {
  const std::size_t o = (row * width + col) * 3;
  return {rgb[o], rgb[o + 1], rgb[o + 2]};
}

std::vector<Rgb> default_palette() {
  return {Rgb{38, 115, 0},   Rgb{255, 0, 0},     Rgb{170, 170, 170}, Rgb{168, 224, 80},  Rgb{255, 170, 0},
          Rgb{255, 0, 255},  Rgb{0, 112, 255},   Rgb{130, 80, 40},   Rgb{0, 255, 255},   Rgb{255, 255, 0},
          Rgb{128, 0, 128},  Rgb{0, 128, 128},   Rgb{255, 128, 128}, Rgb{128, 255, 128}, Rgb{128, 128, 255},
          Rgb{255, 255, 255}};
}

Image render_map(const HapNet& model, const SceneBundle& scene, const BandStats& hsi_stats, const BandStats& sar_stats,
                 const std::vector<Rgb>& palette, std::size_t batch) {
  const std::size_t classes = model.config().classes;
  if (palette.size() < classes) {
    throw ConfigError("palette has " + std::to_string(palette.size()) + " colors for " + std::to_string(classes) +
                      " classes");
  }
  Image img;
  img.width = scene.labels.width;
  img.height = scene.labels.height;
  img.rgb.assign(img.width * img.height * 3, 0);
  std::vector<PixelCoord> labeled;
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t c = 0; c < img.width; ++c) {
      if (scene.labels.at(r, c) != 0) labeled.push_back({r, c});
    }
  }
  // Bounded memory: extract and classify one chunk of pixels at a time.
  const std::size_t chunk = std::max<std::size_t>(batch, 1) * 4;
  for (std::size_t start = 0; start < labeled.size(); start += chunk) {
    const std::size_t end = std::min(labeled.size(), start + chunk);
    const auto coords = std::span<const PixelCoord>(labeled).subspan(start, end - start);
    const PatchSet set = extract_patches(scene.hsi, scene.sar, scene.labels, coords, model.config().patch, hsi_stats, sar_stats);
    const auto pred = predict(model, set, batch);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const Rgb& color = palette[static_cast<std::size_t>(pred[i] - 1)];
      const std::size_t o = (coords[i].row * img.width + coords[i].col) * 3;
      img.rgb[o] = color[0];
      img.rgb[o + 1] = color[1];
      img.rgb[o + 2] = color[2];
    }
  }
  return img;
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
}

}  // namespace hapnet
