#include "hapnet/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <Eigen/Dense>

#include "hapnet/ops.hpp"
#include "hapnet/random.hpp"

namespace hapnet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Modality m) { return m == Modality::HSI ? "HSI" : "SAR"; }

Modality parse_modality(const std::string& text) {
  if (text == "HSI") return Modality::HSI;
  if (text == "SAR") return Modality::SAR;
  throw DataError("unknown modality '" + text + "'");
}

void SceneCube::validate() const {
  if (width == 0 || height == 0 || bands == 0) throw DataError(to_string(modality) + " cube has an empty dimension");
  if (values.size() != width * height * bands) {
    throw DataError(to_string(modality) + " cube holds " + std::to_string(values.size()) + " values, expected " +
                    std::to_string(width * height * bands));
  }
}

void LabelRaster::validate() const {
  if (labels.size() != width * height) throw DataError("label raster size does not match its header");
  for (auto id : labels) {
    if (id > classes()) throw DataError("label id " + std::to_string(id) + " exceeds class count " + std::to_string(classes()));
  }
}

void SceneBundle::validate() const {
  hsi.validate();
  sar.validate();
  labels.validate();
  if (hsi.width != sar.width || hsi.height != sar.height) {
    throw DataError("HSI (" + std::to_string(hsi.width) + "x" + std::to_string(hsi.height) + ") and SAR (" +
                    std::to_string(sar.width) + "x" + std::to_string(sar.height) + ") cubes are not co-registered");
  }
  if (labels.width != hsi.width || labels.height != hsi.height) throw DataError("label raster does not match the cubes");
  std::set<PixelCoord> seen;
  auto check = [&](const std::vector<PixelCoord>& split, const char* name) {
    for (const auto& c : split) {
      if (c.row >= hsi.height || c.col >= hsi.width) {
        throw DataError(std::string(name) + " coordinate (" + std::to_string(c.row) + "," + std::to_string(c.col) +
                        ") is outside the scene");
      }
      if (labels.at(c.row, c.col) == 0) {
        throw DataError(std::string(name) + " coordinate (" + std::to_string(c.row) + "," + std::to_string(c.col) +
                        ") is unlabeled");
      }
    }
  };
  check(train, "train");
  check(test, "test");
  seen.insert(train.begin(), train.end());
  for (const auto& c : test) {
    if (seen.count(c)) {
      throw DataError("train and test splits overlap at (" + std::to_string(c.row) + "," + std::to_string(c.col) + ")");
    }
  }
}

// ------------------------------------------------------------- file io

namespace {

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("missing file " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing file " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void save_cube(const SceneCube& cube, const fs::path& dir, const std::string& stem) {
  json header{{"width", cube.width},
              {"height", cube.height},
              {"bands", cube.bands},
              {"modality", to_string(cube.modality)},
              {"dtype", "float32"},
              {"byte_order", "little"}};
  write_text(dir / (stem + ".json"), header.dump(2) + "\n");
  std::vector<unsigned char> bytes(cube.values.size() * 4);
  for (std::size_t i = 0; i < cube.values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(cube.values[i]));
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xFF);
  }
  write_bytes(dir / (stem + ".bin"), bytes);
}

SceneCube load_cube(const fs::path& dir, const std::string& stem) {
  const json header = read_json(dir / (stem + ".json"));
  SceneCube cube;
  try {
    cube.width = header.at("width").get<std::size_t>();
    cube.height = header.at("height").get<std::size_t>();
    cube.bands = header.at("bands").get<std::size_t>();
    cube.modality = parse_modality(header.at("modality").get<std::string>());
    if (header.value("dtype", "float32") != "float32") throw DataError(stem + ": only float32 rasters are supported");
  } catch (const json::exception& e) {
    throw DataError(stem + ".json: " + e.what());
  }
  const auto bytes = read_bytes(dir / (stem + ".bin"));
  const std::size_t expected = cube.width * cube.height * cube.bands * 4;
  if (bytes.size() != expected) {
    throw DataError(stem + ".bin holds " + std::to_string(bytes.size()) + " bytes, header implies " +
                    std::to_string(expected));
  }
  cube.values.resize(bytes.size() / 4);
  for (std::size_t i = 0; i < cube.values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    cube.values[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  cube.validate();
  return cube;
}

void save_split(const std::vector<PixelCoord>& split, const fs::path& path) {
  std::ostringstream os;
  os << "row,col\n";
  for (const auto& c : split) os << c.row << ',' << c.col << '\n';
  write_text(path, os.str());
}

std::vector<PixelCoord> load_split(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("missing file " + path.string());
  std::string line;
  std::getline(is, line);
  if (line.rfind("row,col", 0) != 0) throw DataError(path.string() + ": expected header 'row,col'");
  std::vector<PixelCoord> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::istringstream ls(line);
    PixelCoord c;
    char comma = 0;
    if (!(ls >> c.row >> comma >> c.col) || comma != ',') {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed coordinate");
    }
    out.push_back(c);
  }
  return out;
}

}  // namespace

void save_scene(const SceneBundle& bundle, const fs::path& dir) {
  bundle.validate();
  fs::create_directories(dir);
  save_cube(bundle.hsi, dir, "hsi");
  save_cube(bundle.sar, dir, "sar");
  json header{{"width", bundle.labels.width}, {"height", bundle.labels.height}, {"classes", bundle.labels.class_names}};
  write_text(dir / "labels.json", header.dump(2) + "\n");
  std::vector<unsigned char> bytes(bundle.labels.labels.size() * 2);
  for (std::size_t i = 0; i < bundle.labels.labels.size(); ++i) {
    bytes[2 * i] = static_cast<unsigned char>(bundle.labels.labels[i] & 0xFF);
    bytes[2 * i + 1] = static_cast<unsigned char>(bundle.labels.labels[i] >> 8);
  }
  write_bytes(dir / "labels.bin", bytes);
  save_split(bundle.train, dir / "train.csv");
  save_split(bundle.test, dir / "test.csv");
}

SceneBundle load_scene(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("scene directory not found: " + dir.string());
  SceneBundle b;
  b.hsi = load_cube(dir, "hsi");
  b.sar = load_cube(dir, "sar");
  if (b.hsi.modality != Modality::HSI || b.sar.modality != Modality::SAR) {
    throw DataError("hsi/sar headers carry the wrong modality tags");
  }
  const json header = read_json(dir / "labels.json");
  try {
    b.labels.width = header.at("width").get<std::size_t>();
    b.labels.height = header.at("height").get<std::size_t>();
    b.labels.class_names = header.at("classes").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("labels.json: ") + e.what());
  }
  const auto bytes = read_bytes(dir / "labels.bin");
  if (bytes.size() != b.labels.width * b.labels.height * 2) throw DataError("labels.bin size does not match labels.json");
  b.labels.labels.resize(bytes.size() / 2);
  for (std::size_t i = 0; i < b.labels.labels.size(); ++i) {
    b.labels.labels[i] = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
  }
  b.train = load_split(dir / "train.csv");
  b.test = load_split(dir / "test.csv");
  b.validate();
  return b;
}

// ----------------------------------------------------------------- PCA

PcaModel fit_pca(const SceneCube& cube, std::size_t k) {
  cube.validate();
  if (k == 0 || k > cube.bands) {
    throw ConfigError("PCA: cannot keep " + std::to_string(k) + " components of " + std::to_string(cube.bands) + " bands");
  }
  const std::size_t N = cube.pixels();
  const std::size_t D = cube.bands;
  PcaModel m;
  m.bands = D;
  m.components = k;
  m.means.assign(D, 0.0);
  for (std::size_t b = 0; b < D; ++b) {
    const double* band = cube.values.data() + b * N;
    double s = 0.0;
    for (std::size_t p = 0; p < N; ++p) s += band[p];
    m.means[b] = s / static_cast<double>(N);
  }
  // Band-major storage is a column-major N x D matrix; accumulate X^T X in chunks.
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(D));
  constexpr std::size_t kChunk = 4096;
  Eigen::MatrixXd chunk;
  for (std::size_t p0 = 0; p0 < N; p0 += kChunk) {
    const std::size_t n = std::min(kChunk, N - p0);
    chunk.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(D));
    for (std::size_t b = 0; b < D; ++b) {
      const double* band = cube.values.data() + b * N + p0;
      for (std::size_t p = 0; p < n; ++p) chunk(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(b)) = band[p] - m.means[b];
    }
    cov.noalias() += chunk.transpose() * chunk;
  }
  cov /= static_cast<double>(N);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("PCA: eigendecomposition failed");
  const auto& values = solver.eigenvalues();     // ascending
  const auto& vectors = solver.eigenvectors();
  m.basis.assign(D * k, 0.0);
  m.explained_variance.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    const auto src = static_cast<Eigen::Index>(D - 1 - j);
    m.explained_variance[j] = std::max(0.0, values(src));
    std::size_t pivot = 0;
    for (std::size_t b = 1; b < D; ++b) {
      if (std::abs(vectors(static_cast<Eigen::Index>(b), src)) > std::abs(vectors(static_cast<Eigen::Index>(pivot), src))) {
        pivot = b;
      }
    }
    const double sign = vectors(static_cast<Eigen::Index>(pivot), src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t b = 0; b < D; ++b) m.basis[b * k + j] = sign * vectors(static_cast<Eigen::Index>(b), src);
  }
  return m;
}

SceneCube apply_pca(const SceneCube& cube, const PcaModel& model) {
  cube.validate();
  if (cube.bands != model.bands) {
    throw DataError("PCA: model expects " + std::to_string(model.bands) + " bands, cube has " + std::to_string(cube.bands));
  }
  const std::size_t N = cube.pixels();
  SceneCube out;
  out.width = cube.width;
  out.height = cube.height;
  out.bands = model.components;
  out.modality = cube.modality;
  out.values.assign(model.components * N, 0.0);
  std::vector<double> centered(N);
  for (std::size_t b = 0; b < model.bands; ++b) {
    const double* band = cube.values.data() + b * N;
    for (std::size_t p = 0; p < N; ++p) centered[p] = band[p] - model.means[b];
    for (std::size_t j = 0; j < model.components; ++j) {
      const double w = model.component(b, j);
      double* dst = out.values.data() + j * N;
      for (std::size_t p = 0; p < N; ++p) dst[p] += w * centered[p];
    }
  }
  return out;
}

json pca_to_json(const PcaModel& model) {
  std::vector<std::vector<double>> components(model.components, std::vector<double>(model.bands));
  for (std::size_t j = 0; j < model.components; ++j) {
    for (std::size_t b = 0; b < model.bands; ++b) components[j][b] = model.component(b, j);
  }
  double total = 0.0;
  for (double v : model.explained_variance) total += v;
  return json{{"bands", model.bands},
              {"components", model.components},
              {"means", model.means},
              {"basis", components},
              {"explained_variance", model.explained_variance},
              {"explained_variance_sum", total}};
}

// ------------------------------------------------------- normalization

BandStats fit_band_stats(const SceneCube& cube, std::span<const PixelCoord> pixels) {
  if (pixels.empty()) throw DataError("normalization: no training pixels");
  BandStats s;
  s.mean.assign(cube.bands, 0.0);
  s.stddev.assign(cube.bands, 0.0);
  const double n = static_cast<double>(pixels.size());
  for (std::size_t b = 0; b < cube.bands; ++b) {
    double sum = 0.0;
    for (const auto& p : pixels) sum += cube.at(b, p.row, p.col);
    const double mu = sum / n;
    double var = 0.0;
    for (const auto& p : pixels) {
      const double d = cube.at(b, p.row, p.col) - mu;
      var += d * d;
    }
    const double sd = std::sqrt(var / n);
    s.mean[b] = mu;
    s.stddev[b] = sd > 0.0 ? sd : 1.0;
  }
  return s;
}

// ------------------------------------------------------------- patches

std::vector<double> extract_window(const SceneCube& cube, PixelCoord center, std::size_t size) {
  if (size % 2 == 0) throw ConfigError("patch size must be odd");
  if (center.row >= cube.height || center.col >= cube.width) {
    throw DataError("patch center (" + std::to_string(center.row) + "," + std::to_string(center.col) +
                    ") outside the scene");
  }
  const auto half = static_cast<std::ptrdiff_t>(size / 2);
  std::vector<double> out(cube.bands * size * size);
  for (std::size_t b = 0; b < cube.bands; ++b) {
    for (std::size_t u = 0; u < size; ++u) {
      const auto r = reflect_index(static_cast<std::ptrdiff_t>(center.row + u) - half, static_cast<std::ptrdiff_t>(cube.height));
      for (std::size_t v = 0; v < size; ++v) {
        const auto c = reflect_index(static_cast<std::ptrdiff_t>(center.col + v) - half, static_cast<std::ptrdiff_t>(cube.width));
        out[(b * size + u) * size + v] = cube.at(b, static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      }
    }
  }
  return out;
}

PatchSet extract_patches(const SceneCube& hsi, const SceneCube& sar, const LabelRaster& labels,
                         std::span<const PixelCoord> coords, std::size_t size, const BandStats& hsi_stats,
                         const BandStats& sar_stats) {
  if (hsi.width != sar.width || hsi.height != sar.height || labels.width != hsi.width || labels.height != hsi.height) {
    throw DataError("patch extraction: cubes and labels are not co-registered");
  }
  if (coords.empty()) throw DataError("patch extraction: no coordinates");
  if (hsi_stats.mean.size() != hsi.bands || sar_stats.mean.size() != sar.bands) {
    throw DataError("patch extraction: normalization statistics do not match band counts");
  }
  const std::size_t B = coords.size();
  const std::size_t P2 = size * size;
  std::vector<double> hv(B * hsi.bands * P2);
  std::vector<double> sv(B * sar.bands * P2);
  PatchSet set;
  for (std::size_t i = 0; i < B; ++i) {
    const auto& c = coords[i];
    if (c.row >= labels.height || c.col >= labels.width) {
      throw DataError("patch extraction: coordinate (" + std::to_string(c.row) + "," + std::to_string(c.col) +
                      ") out of bounds");
    }
    const auto label = labels.at(c.row, c.col);
    if (label == 0) {
      throw DataError("patch extraction: coordinate (" + std::to_string(c.row) + "," + std::to_string(c.col) +
                      ") is unlabeled");
    }
    auto fill = [&](const SceneCube& cube, const BandStats& st, std::vector<double>& dst) {
      auto w = extract_window(cube, c, size);
      for (std::size_t b = 0; b < cube.bands; ++b) {
        for (std::size_t t = 0; t < P2; ++t) {
          dst[(i * cube.bands + b) * P2 + t] = (w[b * P2 + t] - st.mean[b]) / st.stddev[b];
        }
      }
    };
    fill(hsi, hsi_stats, hv);
    fill(sar, sar_stats, sv);
    set.labels.push_back(label);
    set.coords.push_back(c);
  }
  set.hsi = Tensor::from({B, hsi.bands, size, size}, std::move(hv));
  set.sar = Tensor::from({B, sar.bands, size, size}, std::move(sv));
  return set;
}

PatchSet PatchSet::select(std::span<const std::size_t> indices) const {
  const std::size_t hs = hsi.numel() / size();
  const std::size_t ss = sar.numel() / size();
  std::vector<double> hv(indices.size() * hs);
  std::vector<double> sv(indices.size() * ss);
  PatchSet out;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    std::copy_n(hsi.data().data() + src * hs, hs, hv.data() + i * hs);
    std::copy_n(sar.data().data() + src * ss, ss, sv.data() + i * ss);
    out.labels.push_back(labels[src]);
    out.coords.push_back(coords[src]);
  }
  Shape hshape = hsi.shape();
  Shape sshape = sar.shape();
  hshape[0] = sshape[0] = indices.size();
  out.hsi = Tensor::from(std::move(hshape), std::move(hv));
  out.sar = Tensor::from(std::move(sshape), std::move(sv));
  return out;
}

// ----------------------------------------------------------- synthetic

SyntheticScene make_synthetic_scene(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.classes > 255) throw ConfigError("synthetic scene: classes must be in [2, 255]");
  if (spec.width == 0 || spec.height == 0 || spec.block == 0) throw ConfigError("synthetic scene: empty extent");
  Rng rng(spec.seed);
  const std::size_t W = spec.width, H = spec.height, N = W * H;
  SyntheticScene out;

  // Smooth spectral signatures: baseline plus three Gaussian absorption/reflection bumps.
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::vector<double> sig(spec.hsi_bands);
    const double base = rng.uniform(0.2, 0.6);
    double centers[3], widths[3], amps[3];
    for (int j = 0; j < 3; ++j) {
      centers[j] = rng.uniform(0.0, static_cast<double>(spec.hsi_bands));
      widths[j] = rng.uniform(2.0, 0.25 * static_cast<double>(spec.hsi_bands) + 2.0);
      amps[j] = rng.uniform(-0.3, 0.5);
    }
    for (std::size_t b = 0; b < spec.hsi_bands; ++b) {
      double v = base;
      for (int j = 0; j < 3; ++j) {
        const double z = (static_cast<double>(b) - centers[j]) / widths[j];
        v += amps[j] * std::exp(-0.5 * z * z);
      }
      sig[b] = std::clamp(v, 0.02, 1.5);
    }
    out.hsi_signatures.push_back(std::move(sig));
    std::vector<double> sar(spec.sar_bands);
    for (auto& s : sar) s = rng.uniform(0.1, 1.0);
    out.sar_means.push_back(std::move(sar));
  }

  // Square class regions; every class gets at least floor(blocks / classes) of them.
  const std::size_t bw = (W + spec.block - 1) / spec.block;
  const std::size_t bh = (H + spec.block - 1) / spec.block;
  std::vector<std::size_t> block_class(bw * bh);
  for (std::size_t i = 0; i < block_class.size(); ++i) block_class[i] = i % spec.classes;
  rng.shuffle(block_class);

  LabelRaster& lab = out.bundle.labels;
  lab.width = W;
  lab.height = H;
  lab.labels.assign(N, 0);
  for (std::size_t c = 0; c < spec.classes; ++c) lab.class_names.push_back("class_" + std::to_string(c + 1));
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t col = 0; col < W; ++col) {
      const std::size_t cls = block_class[(r / spec.block) * bw + col / spec.block];
      // A sparse scatter of unlabeled pixels.
      const bool unlabeled = rng.uniform() < 0.05;
      lab.labels[r * W + col] = unlabeled ? 0 : static_cast<std::uint16_t>(cls + 1);
    }
  }

  auto& hsi = out.bundle.hsi;
  hsi.width = W;
  hsi.height = H;
  hsi.bands = spec.hsi_bands;
  hsi.modality = Modality::HSI;
  hsi.values.resize(spec.hsi_bands * N);
  auto& sar = out.bundle.sar;
  sar.width = W;
  sar.height = H;
  sar.bands = spec.sar_bands;
  sar.modality = Modality::SAR;
  sar.values.resize(spec.sar_bands * N);
  for (std::size_t p = 0; p < N; ++p) {
    const std::size_t r = p / W, col = p % W;
    const std::size_t cls = block_class[(r / spec.block) * bw + col / spec.block];
    const double illumination = 1.0 + 0.05 * rng.normal();
    for (std::size_t b = 0; b < spec.hsi_bands; ++b) {
      const double v = out.hsi_signatures[cls][b] * illumination + 0.02 * rng.normal();
      hsi.values[b * N + p] = static_cast<double>(static_cast<float>(v));
    }
    for (std::size_t b = 0; b < spec.sar_bands; ++b) {
      // Four-look speckle: mean of four unit exponentials.
      double speckle = 0.0;
      for (int look = 0; look < 4; ++look) speckle -= std::log(1.0 - rng.uniform());
      const double v = out.sar_means[cls][b] * speckle / 4.0;
      sar.values[b * N + p] = static_cast<double>(static_cast<float>(v));
    }
  }

  for (std::size_t c = 1; c <= spec.classes; ++c) {
    std::vector<PixelCoord> pool;
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t col = 0; col < W; ++col) {
        if (lab.labels[r * W + col] == c) pool.push_back({r, col});
      }
    }
    if (pool.size() < spec.train_per_class + spec.test_per_class) {
      throw ConfigError("synthetic scene: class " + std::to_string(c) + " has only " + std::to_string(pool.size()) +
                        " labeled pixels; enlarge the scene");
    }
    rng.shuffle(pool);
    out.bundle.train.insert(out.bundle.train.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.train_per_class));
    out.bundle.test.insert(out.bundle.test.end(), pool.begin() + static_cast<std::ptrdiff_t>(spec.train_per_class),
                           pool.begin() + static_cast<std::ptrdiff_t>(spec.train_per_class + spec.test_per_class));
  }
  out.bundle.validate();
  return out;
}

}  // namespace hapnet
