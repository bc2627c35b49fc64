#include "hapnet/cli.hpp"

#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "hapnet/data.hpp"
#include "hapnet/error.hpp"
#include "hapnet/gradcheck.hpp"

namespace hapnet {

namespace fs = std::filesystem;
using nlohmann::json;

void to_json(json& j, const RunConfig& c) {
  j = json{{"model", c.model}, {"train", c.train}, {"scene", c.scene}, {"out", c.out}, {"seed", c.seed}};
}

void from_json(const json& j, RunConfig& c) {
  static const std::set<std::string> allowed{"model", "train", "scene", "out", "seed"};
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("config: unknown key '" + key + "'");
  }
  try {
    if (j.contains("model")) from_json(j.at("model"), c.model);
    if (j.contains("train")) from_json(j.at("train"), c.train);
    if (j.contains("scene")) c.scene = j.at("scene").get<std::string>();
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  RunConfig c;
  from_json(j, c);
  c.model.validate();
  c.train.validate();
  return c;
}

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string scene;
  std::string checkpoint;
  std::string component = "all";
  std::string precision;
};

RunConfig resolve(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (!f.scene.empty()) c.scene = f.scene;
  if (!f.out.empty()) c.out = f.out;
  if (f.seed) {
    c.seed = *f.seed;
    c.train.seed = *f.seed;
  }
  if (!f.precision.empty()) c.train.precision = parse_precision(f.precision);
  c.model.validate();
  c.train.validate();
  return c;
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void write_text(const std::string& text, const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

fs::path ensure_dir(const std::string& dir) {
  if (dir.empty()) throw ConfigError("an output directory is required (--out)");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir + ": " + ec.message());
  return dir;
}

void echo(std::ostream& out, const json& j) { out << j.dump(2) << '\n'; }

void require_scene(const RunConfig& c) {
  if (c.scene.empty()) throw ConfigError("a scene directory is required (--scene or \"scene\")");
}

void check_scene_matches(const SceneBundle& s, const ModelConfig& m) {
  if (s.hsi.bands != m.hsi_channels) {
    throw DataError("scene has " + std::to_string(s.hsi.bands) + " HSI bands, model expects " +
                    std::to_string(m.hsi_channels) + " (run prep first)");
  }
  if (s.sar.bands != m.sar_channels) {
    throw DataError("scene has " + std::to_string(s.sar.bands) + " SAR bands, model expects " +
                    std::to_string(m.sar_channels));
  }
  if (s.labels.classes() != m.classes) {
    throw DataError("scene has " + std::to_string(s.labels.classes()) + " classes, model expects " +
                    std::to_string(m.classes));
  }
}

int cmd_synth(const Flags& f, std::ostream& out) {
  SyntheticSpec spec;
  if (f.seed) spec.seed = *f.seed;
  const fs::path dir = ensure_dir(f.out);
  const auto scene = make_synthetic_scene(spec);
  save_scene(scene.bundle, dir);
  echo(out, json{{"synth",
                  {{"seed", spec.seed},
                   {"classes", spec.classes},
                   {"width", spec.width},
                   {"height", spec.height},
                   {"hsi_bands", spec.hsi_bands},
                   {"sar_bands", spec.sar_bands},
                   {"train", scene.bundle.train.size()},
                   {"test", scene.bundle.test.size()}}},
                 {"out", dir.string()}});
  return kExitOk;
}

int cmd_prep(const Flags& f, std::ostream& out) {
  const RunConfig c = resolve(f);
  require_scene(c);
  SceneBundle scene = load_scene(c.scene);
  const PcaModel pca = fit_pca(scene.hsi, c.model.hsi_channels);
  scene.hsi = apply_pca(scene.hsi, pca);
  const fs::path dir = ensure_dir(c.out);
  save_scene(scene, dir);
  write_json(pca_to_json(pca), dir / "pca.json");
  echo(out, json{{"prep", {{"scene", c.scene}, {"components", pca.components}, {"bands", pca.bands}}},
                 {"out", dir.string()}});
  return kExitOk;
}

int cmd_train(const Flags& f, std::ostream& out) {
  const RunConfig c = resolve(f);
  require_scene(c);
  echo(out, json(c));
  const SceneBundle scene = load_scene(c.scene);
  check_scene_matches(scene, c.model);
  const BandStats hs = fit_band_stats(scene.hsi, scene.train);
  const BandStats ss = fit_band_stats(scene.sar, scene.train);
  const PatchSet patches = extract_patches(scene.hsi, scene.sar, scene.labels, scene.train, c.model.patch, hs, ss);
  HapNet model(c.model, c.seed);
  const auto log = train(model, patches, c.train, &out);
  const fs::path dir = ensure_dir(c.out);
  save_checkpoint(model, dir / "model.ckpt", c.train.precision);
  write_loss_csv(log, dir / "loss.csv");
  write_json(json(c), dir / "config.json");
  out << "wrote " << (dir / "model.ckpt").string() << '\n';
  return kExitOk;
}

int cmd_eval(const Flags& f, std::ostream& out) {
  if (f.checkpoint.empty()) throw ConfigError("eval requires --checkpoint");
  Flags g = f;
  if (g.config.empty()) {
    const fs::path sidecar = fs::path(f.checkpoint).parent_path() / "config.json";
    if (!fs::exists(sidecar)) throw ConfigError("no --config given and no config.json beside the checkpoint");
    g.config = sidecar.string();
  }
  const RunConfig c = resolve(g);
  require_scene(c);
  echo(out, json(c));
  const SceneBundle scene = load_scene(c.scene);
  check_scene_matches(scene, c.model);
  HapNet model(c.model, c.seed);
  load_checkpoint(model, f.checkpoint);
  const BandStats hs = fit_band_stats(scene.hsi, scene.train);
  const BandStats ss = fit_band_stats(scene.sar, scene.train);
  const PatchSet test = extract_patches(scene.hsi, scene.sar, scene.labels, scene.test, c.model.patch, hs, ss);
  const ConfusionMatrix cm = evaluate(model, test);
  const MetricsReport report = metrics(cm);
  const std::string table = report.table(scene.labels.class_names);
  out << table;
  if (!f.out.empty()) {
    const fs::path dir = ensure_dir(f.out);
    json j = report.to_json(scene.labels.class_names);
    std::vector<std::vector<std::uint64_t>> rows(cm.classes, std::vector<std::uint64_t>(cm.classes));
    for (std::size_t r = 0; r < cm.classes; ++r) {
      for (std::size_t k = 0; k < cm.classes; ++k) rows[r][k] = cm.at(r, k);
    }
    j["confusion"] = rows;
    write_json(j, dir / "metrics.json");
    write_text(table, dir / "metrics.txt");
    write_ppm(render_map(model, scene, hs, ss, default_palette()), dir / "map.ppm");
  }
  return kExitOk;
}

int cmd_gradcheck(const Flags& f, std::ostream& out) {
  const std::uint64_t seed = f.seed.value_or(1);
  const auto results = run_gradcheck_suite(f.component, seed);
  bool ok = true;
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(28) << r.name << " rel_err "
        << std::scientific << std::setprecision(3) << r.max_relative_error << std::defaultfloat << " coords "
        << r.coords_checked << '\n';
    ok = ok && r.passed;
  }
  out << results.size() << " checks, " << (ok ? "all passed" : "failures present") << '\n';
  return ok ? kExitOk : kExitNumeric;
}

int cmd_flops(const Flags& f, std::ostream& out) {
  const RunConfig c = resolve(f);
  echo(out, json{{"model", c.model}});
  const FlopReport report = count_flops(c.model);
  std::size_t wname = 5;
  for (const auto& item : report.items) wname = std::max(wname, item.block.size());
  out << std::left << std::setw(static_cast<int>(wname)) << "block" << "  level  " << std::setw(9) << "category"
      << std::right << std::setw(14) << "flops" << '\n';
  for (const auto& item : report.items) {
    out << std::left << std::setw(static_cast<int>(wname)) << item.block << "  " << std::setw(5) << item.level << "  "
        << std::setw(9) << item.category << std::right << std::setw(14) << std::fixed << std::setprecision(0)
        << item.flops << '\n';
  }
  out << std::defaultfloat << std::setprecision(6);
  json summary = {{"total", report.total()}};
  for (const char* cat : {"attention", "conv", "linear", "fft"}) {
    out << "category " << cat << ": " << report.category(cat) / 1e6 << " M\n";
    summary["category"][cat] = report.category(cat);
  }
  for (std::size_t level = 0; level <= 3; ++level) {
    out << "level " << level << ": " << report.level(level) / 1e6 << " M\n";
    summary["level"][std::to_string(level)] = report.level(level);
  }
  out << "total: " << report.total() / 1e6 << " M\n";
  if (!f.out.empty()) {
    const fs::path dir = ensure_dir(f.out);
    json items = json::array();
    for (const auto& item : report.items) {
      items.push_back({{"block", item.block}, {"level", item.level}, {"category", item.category}, {"flops", item.flops}});
    }
    summary["items"] = items;
    write_json(summary, dir / "flops.json");
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"HSI + SAR patch classifier", "hapnet"};
  app.require_subcommand(1);
  Flags f;
  std::uint64_t seed_value = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON run config");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--seed", seed_value, "random seed");
  };
  auto* synth = app.add_subcommand("synth", "write the synthetic fixture scene");
  add_common(synth);
  auto* prep = app.add_subcommand("prep", "PCA-reduce the HSI cube of a scene");
  add_common(prep);
  prep->add_option("--scene", f.scene, "scene bundle directory");
  auto* trn = app.add_subcommand("train", "train and write a checkpoint and loss log");
  add_common(trn);
  trn->add_option("--scene", f.scene, "scene bundle directory");
  trn->add_option("--precision", f.precision, "f32 or f64");
  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(evl);
  evl->add_option("--scene", f.scene, "scene bundle directory");
  evl->add_option("--checkpoint", f.checkpoint, "checkpoint file");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(grad);
  grad->add_option("--component", f.component, "tensor, ham, pffm, model or all");
  auto* flops = app.add_subcommand("flops", "FLOP breakdown of a model config");
  add_common(flops);

  std::vector<std::string> storage{"hapnet"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }
  for (auto* sub : {synth, prep, trn, evl, grad, flops}) {
    if (sub->count("--seed")) f.seed = seed_value;
  }

  try {
    if (*synth) return cmd_synth(f, out);
    if (*prep) return cmd_prep(f, out);
    if (*trn) return cmd_train(f, out);
    if (*evl) return cmd_eval(f, out);
    if (*grad) return cmd_gradcheck(f, out);
    if (*flops) return cmd_flops(f, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitConfig;
}

}  // namespace hapnet
