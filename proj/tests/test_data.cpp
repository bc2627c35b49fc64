#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hapnet/data.hpp"
#include "hapnet/error.hpp"
#include "oracles.hpp"

using namespace hapnet;
namespace fs = std::filesystem;

namespace {

SceneCube cube_from(std::size_t width, std::size_t height, std::size_t bands, std::vector<double> values,
                    Modality m = Modality::HSI) {
  SceneCube c;
  c.width = width;
  c.height = height;
  c.bands = bands;
  c.modality = m;
  c.values = std::move(values);
  return c;
}

// Pixels x bands sample matrix of a band-major cube.
oracle::Matrix samples(const SceneCube& c) {
  oracle::Matrix s(c.pixels(), std::vector<double>(c.bands));
  for (std::size_t b = 0; b < c.bands; ++b) {
    for (std::size_t p = 0; p < c.pixels(); ++p) s[p][b] = c.values[b * c.pixels() + p];
  }
  return s;
}

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "hapnet_test_data" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.width = 48;
  s.height = 48;
  s.block = 12;
  s.hsi_bands = 16;
  s.train_per_class = 10;
  s.test_per_class = 40;
  return s;
}

}  // namespace

TEST_CASE("PCA matches a Jacobi eigendecomposition of the covariance up to sign") {
  Rng rng(41);
  // Correlated bands: random mixing of independent sources with distinct scales.
  const std::size_t N = 200, D = 12;
  std::vector<double> mix(D * D);
  for (auto& v : mix) v = rng.normal();
  std::vector<double> values(N * D, 0.0);
  for (std::size_t p = 0; p < N; ++p) {
    for (std::size_t s = 0; s < D; ++s) {
      const double src = rng.normal() * (1.0 + static_cast<double>(D - s));
      for (std::size_t b = 0; b < D; ++b) values[b * N + p] += mix[b * D + s] * src;
    }
  }
  const SceneCube cube = cube_from(20, 10, D, values);
  const PcaModel pca = fit_pca(cube, 4);
  const auto [eigvals, eigvecs] = oracle::jacobi_eigen(oracle::covariance(samples(cube)));
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(std::abs(pca.explained_variance[j] - eigvals[j]) < 1e-8 * std::max(1.0, eigvals[j]));
    double dot = 0.0;
    for (std::size_t b = 0; b < D; ++b) dot += pca.component(b, j) * eigvecs[b][j];
    const double sign = dot < 0 ? -1.0 : 1.0;
    for (std::size_t b = 0; b < D; ++b) CHECK(std::abs(pca.component(b, j) - sign * eigvecs[b][j]) < 1e-8);
    if (j > 0) CHECK(pca.explained_variance[j] <= pca.explained_variance[j - 1]);
    for (std::size_t i = 0; i <= j; ++i) {
      double g = 0.0;
      for (std::size_t b = 0; b < D; ++b) g += pca.component(b, i) * pca.component(b, j);
      CHECK(std::abs(g - (i == j ? 1.0 : 0.0)) < 1e-12);
    }
  }

  // Projected bands are centered and carry the explained variances.
  const SceneCube reduced = apply_pca(cube, pca);
  CHECK(reduced.bands == 4);
  for (std::size_t j = 0; j < 4; ++j) {
    double m = 0.0, v = 0.0;
    for (std::size_t p = 0; p < N; ++p) m += reduced.values[j * N + p] / N;
    for (std::size_t p = 0; p < N; ++p) v += std::pow(reduced.values[j * N + p] - m, 2) / N;
    CHECK(std::abs(m) < 1e-8);
    CHECK(std::abs(v - pca.explained_variance[j]) < 1e-6);
  }
  const auto js = pca_to_json(pca);
  double sum = 0.0;
  for (std::size_t j = 0; j < 4; ++j) sum += eigvals[j];
  CHECK(std::abs(js.at("explained_variance_sum").get<double>() - sum) < 1e-6);
  CHECK_THROWS_AS(fit_pca(cube, 13), ConfigError);
  CHECK_THROWS_AS(apply_pca(cube_from(2, 2, 3, std::vector<double>(12, 1.0)), pca), DataError);
}

TEST_CASE("PCA reconstructs data lying in a low-dimensional affine subspace") {
  Rng rng(42);
  const std::size_t N = 300, D = 9, K = 3;
  std::vector<double> basis(D * K), offset(D);
  for (auto& v : basis) v = rng.normal();
  for (auto& v : offset) v = rng.normal(5.0, 1.0);
  std::vector<double> values(N * D);
  for (std::size_t p = 0; p < N; ++p) {
    double coef[K];
    for (auto& c : coef) c = rng.normal();
    for (std::size_t b = 0; b < D; ++b) {
      double v = offset[b];
      for (std::size_t k = 0; k < K; ++k) v += basis[b * K + k] * coef[k];
      values[b * N + p] = v;
    }
  }
  const SceneCube cube = cube_from(30, 10, D, values);
  const PcaModel pca = fit_pca(cube, K);
  const SceneCube reduced = apply_pca(cube, pca);
  double err = 0.0;
  for (std::size_t p = 0; p < N; ++p) {
    for (std::size_t b = 0; b < D; ++b) {
      double rec = pca.means[b];
      for (std::size_t k = 0; k < K; ++k) rec += pca.component(b, k) * reduced.values[k * N + p];
      err = std::max(err, std::abs(rec - values[b * N + p]));
    }
  }
  CHECK(err < 1e-8);
}

TEST_CASE("isotropic data spreads variance evenly") {
  // The 2^4 corners of a hypercube have identity covariance exactly.
  std::vector<double> values(16 * 4);
  for (std::size_t p = 0; p < 16; ++p) {
    for (std::size_t b = 0; b < 4; ++b) values[b * 16 + p] = (p >> b) & 1 ? 1.0 : -1.0;
  }
  const PcaModel pca = fit_pca(cube_from(4, 4, 4, values), 4);
  for (double v : pca.explained_variance) CHECK(std::abs(v - 1.0) < 1e-12);
}

TEST_CASE("an Augsburg-shaped cube reduces from 180 to 30 bands") {
  Rng rng(43);
  const std::size_t W = 485, H = 332, D = 180;
  std::vector<double> values(W * H * D);
  for (auto& v : values) v = rng.uniform();
  const SceneCube cube = cube_from(W, H, D, std::move(values));
  const PcaModel pca = fit_pca(cube, 30);
  const SceneCube reduced = apply_pca(cube, pca);
  CHECK(reduced.width == 485);
  CHECK(reduced.height == 332);
  CHECK(reduced.bands == 30);
  CHECK(reduced.values.size() == 332u * 485u * 30u);
}

TEST_CASE("band statistics use only the given training pixels") {
  SceneCube c = cube_from(3, 1, 2, {1, 3, 100, 10, 14, -50});
  const std::vector<PixelCoord> train{{0, 0}, {0, 1}};
  const BandStats s = fit_band_stats(c, train);
  CHECK(s.mean == std::vector<double>{2.0, 12.0});
  CHECK(s.stddev == std::vector<double>{1.0, 2.0});
  c.values[2] = -7.0;
  c.values[5] = 1e6;
  const BandStats again = fit_band_stats(c, train);
  CHECK(again.mean == s.mean);
  CHECK(again.stddev == s.stddev);
  const BandStats flat = fit_band_stats(cube_from(2, 1, 1, {4, 4}), train);
  CHECK(flat.stddev[0] == 1.0);
}

TEST_CASE("patches match a sliding-window oracle with reflect padding") {
  // 5x5 toy scene, one band, value = 10 * row + col.
  std::vector<double> v(25);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 5; ++c) v[r * 5 + c] = 10.0 * r + c;
  }
  const SceneCube hsi = cube_from(5, 5, 1, v);
  const SceneCube sar = cube_from(5, 5, 1, v, Modality::SAR);
  LabelRaster labels;
  labels.width = labels.height = 5;
  labels.labels.assign(25, 1);
  labels.class_names = {"a"};
  const BandStats unit{{0.0}, {1.0}};
  std::vector<PixelCoord> coords;
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 5; ++c) coords.push_back({r, c});
  }
  const PatchSet set = extract_patches(hsi, sar, labels, coords, 3, unit, unit);
  CHECK(set.hsi.shape() == Shape{25, 1, 3, 3});
  auto reflect = [](long i) { return i < 0 ? -i : (i > 4 ? 8 - i : i); };
  for (std::size_t i = 0; i < 25; ++i) {
    const long r = static_cast<long>(coords[i].row), c = static_cast<long>(coords[i].col);
    for (long u = -1; u <= 1; ++u) {
      for (long w = -1; w <= 1; ++w) {
        const double expect = 10.0 * reflect(r + u) + reflect(c + w);
        CHECK(set.hsi[i * 9 + static_cast<std::size_t>((u + 1) * 3 + (w + 1))] == expect);
      }
    }
  }
  // Corner (0,0) with the full 11x11 window is valid.
  const PatchSet corner = extract_patches(hsi, sar, labels, std::vector<PixelCoord>{{0, 0}}, 11, unit, unit);
  CHECK(corner.hsi.shape() == Shape{1, 1, 11, 11});
  CHECK(corner.hsi[5 * 11 + 5] == 0.0);
  CHECK_THROWS_AS(extract_patches(hsi, sar, labels, std::vector<PixelCoord>{{5, 0}}, 3, unit, unit), DataError);
}

TEST_CASE("patch centers carry the normalized scene values and shift with the scene") {
  const auto scene = make_synthetic_scene(small_spec()).bundle;
  const BandStats hs = fit_band_stats(scene.hsi, scene.train);
  const BandStats ss = fit_band_stats(scene.sar, scene.train);
  const PatchSet set = extract_patches(scene.hsi, scene.sar, scene.labels, scene.train, 11, hs, ss);
  CHECK(set.labels.size() == scene.train.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto c = scene.train[i];
    CHECK(set.labels[i] == scene.labels.at(c.row, c.col));
    for (std::size_t b = 0; b < scene.hsi.bands; ++b) {
      const double expect = (scene.hsi.at(b, c.row, c.col) - hs.mean[b]) / hs.stddev[b];
      CHECK(set.hsi[((i * scene.hsi.bands + b) * 11 + 5) * 11 + 5] == expect);
    }
  }
  // Translation: a window away from the border equals the window of the shifted center in a shifted scene.
  SceneCube shifted = scene.hsi;
  const std::size_t W = shifted.width, H = shifted.height;
  for (std::size_t b = 0; b < shifted.bands; ++b) {
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < W; ++c) shifted.values[(b * H + r) * W + c] = scene.hsi.at(b, r, (c + W - 3) % W);
    }
  }
  CHECK(extract_window(scene.hsi, {20, 20}, 11) == extract_window(shifted, {20, 23}, 11));
}

TEST_CASE("scene bundles round-trip and invalid bundles are rejected") {
  const auto scene = make_synthetic_scene(small_spec()).bundle;
  const fs::path dir = temp_dir("roundtrip");
  save_scene(scene, dir);
  const SceneBundle back = load_scene(dir);
  CHECK(back.hsi.values == scene.hsi.values);
  CHECK(back.sar.values == scene.sar.values);
  CHECK(back.labels.labels == scene.labels.labels);
  CHECK(back.labels.class_names == scene.labels.class_names);
  CHECK(back.train == scene.train);
  CHECK(back.test == scene.test);

  SceneBundle overlap = scene;
  overlap.test.push_back(overlap.train.front());
  CHECK_THROWS_AS(overlap.validate(), DataError);
  const fs::path bad = temp_dir("overlap");
  save_scene(scene, bad);
  {
    std::ofstream os(bad / "test.csv", std::ios::app);
    os << scene.train.front().row << ',' << scene.train.front().col << '\n';
  }
  CHECK_THROWS_AS(load_scene(bad), DataError);

  SceneBundle misaligned = scene;
  misaligned.sar.width -= 1;
  misaligned.sar.values.resize(misaligned.sar.width * misaligned.sar.height * misaligned.sar.bands);
  CHECK_THROWS_AS(misaligned.validate(), DataError);

  const fs::path truncated = temp_dir("truncated");
  save_scene(scene, truncated);
  fs::resize_file(truncated / "hsi.bin", fs::file_size(truncated / "hsi.bin") - 4);
  CHECK_THROWS_AS(load_scene(truncated), DataError);
  CHECK_THROWS_AS(load_scene(temp_dir("empty")), DataError);
}

TEST_CASE("an Augsburg-format bundle reports its 761 training coordinates") {
  // Augsburg geometry (332 x 485, 7 classes, 4 SAR bands); a thin HSI stack keeps the file small.
  SceneBundle b;
  b.hsi = cube_from(485, 332, 2, std::vector<double>(485 * 332 * 2, 0.5));
  b.sar = cube_from(485, 332, 4, std::vector<double>(485 * 332 * 4, 0.25), Modality::SAR);
  b.labels.width = 485;
  b.labels.height = 332;
  b.labels.class_names = {"Forest", "Residential-Area", "Industrial-Area", "Low-Plants", "Allotment", "Commercial-Area", "Water"};
  b.labels.labels.assign(485 * 332, 0);
  for (std::size_t i = 0; i < 761; ++i) {
    const PixelCoord c{i / 485 * 2, i % 485};
    b.labels.labels[c.row * 485 + c.col] = static_cast<std::uint16_t>(1 + i % 7);
    b.train.push_back(c);
  }
  const fs::path dir = temp_dir("augsburg");
  save_scene(b, dir);
  const SceneBundle back = load_scene(dir);
  CHECK(back.train.size() == 761);
  CHECK(back.labels.classes() == 7);
}

TEST_CASE("the synthetic fixture is deterministic and separable") {
  const SyntheticSpec spec;
  const auto a = make_synthetic_scene(spec);
  const auto b = make_synthetic_scene(spec);
  CHECK(a.bundle.hsi.values == b.bundle.hsi.values);
  CHECK(a.bundle.sar.values == b.bundle.sar.values);
  CHECK(a.bundle.labels.labels == b.bundle.labels.labels);
  CHECK(a.bundle.train == b.bundle.train);
  CHECK(a.hsi_signatures.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = i + 1; j < 7; ++j) CHECK(a.hsi_signatures[i] != a.hsi_signatures[j]);
  }
  CHECK(a.bundle.train.size() == 210);
  CHECK(a.bundle.test.size() == 700);
  SyntheticSpec other = spec;
  other.seed = 2;
  CHECK(make_synthetic_scene(other).bundle.hsi.values != a.bundle.hsi.values);

  // Nearest class mean on raw spectra, means from the training pixels.
  const auto& s = a.bundle;
  std::vector<std::vector<double>> means(7, std::vector<double>(s.hsi.bands, 0.0));
  std::vector<double> counts(7, 0.0);
  for (const auto& c : s.train) {
    const std::size_t k = s.labels.at(c.row, c.col) - 1;
    counts[k] += 1.0;
    for (std::size_t b = 0; b < s.hsi.bands; ++b) means[k][b] += s.hsi.at(b, c.row, c.col);
  }
  for (std::size_t k = 0; k < 7; ++k) {
    for (auto& m : means[k]) m /= counts[k];
  }
  std::size_t correct = 0;
  for (const auto& c : s.test) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < 7; ++k) {
      double d = 0.0;
      for (std::size_t b = 0; b < s.hsi.bands; ++b) d += std::pow(s.hsi.at(b, c.row, c.col) - means[k][b], 2);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    if (best + 1 == s.labels.at(c.row, c.col)) ++correct;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(s.test.size()) > 0.9);
}
