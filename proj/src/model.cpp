#include "hapnet/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace hapnet {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid value for '") + key + "': " + e.what());
  }
}

}  // namespace

void to_json(json& j, const HamConfig& c) {
  j = json{{"use_global", c.use_global},
           {"use_spectral", c.use_spectral},
           {"use_local", c.use_local},
           {"expansion", c.expansion},
           {"local_kernel", c.local_kernel},
           {"reduction", c.reduction},
           {"heads", c.heads},
           {"spatial_anchor", c.spatial_anchor},
           {"spectral_anchor", c.spectral_anchor},
           {"spectral_width", c.spectral_width}};
}

void from_json(const json& j, HamConfig& c) {
  reject_unknown(j,
                 {"use_global", "use_spectral", "use_local", "expansion", "local_kernel", "reduction", "heads",
                  "spatial_anchor", "spectral_anchor", "spectral_width"},
                 "ham");
  read_opt(j, "use_global", c.use_global);
  read_opt(j, "use_spectral", c.use_spectral);
  read_opt(j, "use_local", c.use_local);
  read_opt(j, "expansion", c.expansion);
  read_opt(j, "local_kernel", c.local_kernel);
  read_opt(j, "reduction", c.reduction);
  read_opt(j, "heads", c.heads);
  read_opt(j, "spatial_anchor", c.spatial_anchor);
  read_opt(j, "spectral_anchor", c.spectral_anchor);
  read_opt(j, "spectral_width", c.spectral_width);
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"hsi_channels", c.hsi_channels}, {"sar_channels", c.sar_channels}, {"patch", c.patch},
           {"widths", c.widths},             {"classes", c.classes},           {"hidden", c.hidden},
           {"use_ham", c.use_ham},           {"use_pffm", c.use_pffm},         {"ham", c.ham}};
}

void from_json(const json& j, ModelConfig& c) {
  reject_unknown(j,
                 {"hsi_channels", "sar_channels", "patch", "widths", "classes", "hidden", "use_ham", "use_pffm", "ham"},
                 "model");
  read_opt(j, "hsi_channels", c.hsi_channels);
  read_opt(j, "sar_channels", c.sar_channels);
  read_opt(j, "patch", c.patch);
  read_opt(j, "widths", c.widths);
  read_opt(j, "classes", c.classes);
  read_opt(j, "hidden", c.hidden);
  read_opt(j, "use_ham", c.use_ham);
  read_opt(j, "use_pffm", c.use_pffm);
  if (j.contains("ham")) from_json(j.at("ham"), c.ham);
}

void ModelConfig::validate() const {
  if (classes < 2) throw ConfigError("model: class count must be >= 2");
  if (patch % 2 == 0) throw ConfigError("model: patch size must be odd");
  if (hsi_channels == 0 || sar_channels == 0 || hidden == 0) throw ConfigError("model: channel counts must be positive");
  for (std::size_t w : widths) {
    if (w == 0) throw ConfigError("model: stage widths must be positive");
    if (use_ham && w % ham.heads != 0) throw ConfigError("model: stage widths must be multiples of the head count");
  }
  ham.validate();
}

std::uint64_t config_hash(const ModelConfig& config) {
  const std::string text = json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

HapNet::HapNet(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t P = config_.patch;
  const auto& w = config_.widths;
  stem_ = Conv2d(store_, "hsi.stem", config_.hsi_channels, w[0], 1, rng);
  std::size_t sar_in = config_.sar_channels;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string level = std::to_string(i + 1);
    if (i > 0) transitions_.emplace_back(store_, "hsi.expand" + level, w[i - 1], w[i], 1, rng);
    if (config_.use_ham) {
      ham_.emplace_back(store_, "hsi.ham" + level, w[i], P, P, config_.ham, rng);
    } else {
      plain_.emplace_back(store_, "hsi.conv" + level, w[i], w[i], 3, rng);
      plain_norm_.emplace_back(store_, "hsi.norm" + level, w[i]);
    }
    sar_conv_.emplace_back(store_, "sar.conv" + level, sar_in, w[i], 3, rng);
    sar_norm_.emplace_back(store_, "sar.norm" + level, w[i]);
    sar_in = w[i];
    if (config_.use_pffm) filters_.emplace_back(store_, "pffm" + level, w[i], P, P);
  }
  fc1_ = Linear(store_, "head.fc1", w[0] + w[1] + w[2], config_.hidden, rng);
  fc2_ = Linear(store_, "head.fc2", config_.hidden, config_.classes, rng);
}

Tensor HapNet::forward(const Tensor& hsi, const Tensor& sar) const {
  const std::size_t P = config_.patch;
  if (hsi.rank() != 4 || hsi.dim(1) != config_.hsi_channels || hsi.dim(2) != P || hsi.dim(3) != P) {
    throw ShapeError("model: HSI batch " + to_string(hsi.shape()) + " does not match B x " +
                     std::to_string(config_.hsi_channels) + " x " + std::to_string(P) + " x " + std::to_string(P));
  }
  if (sar.rank() != 4 || sar.dim(1) != config_.sar_channels || sar.dim(2) != hsi.dim(2) || sar.dim(3) != hsi.dim(3) ||
      sar.dim(0) != hsi.dim(0)) {
    throw ShapeError("model: SAR batch " + to_string(sar.shape()) + " is not co-registered with HSI batch " +
                     to_string(hsi.shape()));
  }
  const std::size_t B = hsi.dim(0);
  Tensor h = stem_(hsi);
  Tensor s = sar;
  std::vector<Tensor> pooled;
  for (std::size_t i = 0; i < 3; ++i) {
    if (i > 0) h = transitions_[i - 1](h);
    h = config_.use_ham ? ham_[i](h) : relu(plain_norm_[i](plain_[i](h)));
    s = relu(sar_norm_[i](sar_conv_[i](s)));
    Tensor fused = config_.use_pffm ? pffm_fuse(h, s, filters_[i]) : add(h, s);
    pooled.push_back(mean_axis(reshape(fused, {B, config_.widths[i], P * P}), 2));
  }
  return fc2_(relu(fc1_(concat(pooled, 1))));
}

// ------------------------------------------------------------- FLOPs

double linear_flops(std::size_t in, std::size_t out, std::size_t tokens) {
  return 2.0 * static_cast<double>(in) * static_cast<double>(out) * static_cast<double>(tokens);
}

double conv_flops(std::size_t in, std::size_t out, std::size_t kernel, std::size_t pixels) {
  return 2.0 * static_cast<double>(in * out * kernel * kernel) * static_cast<double>(pixels);
}

double anchored_attention_flops(std::size_t tokens, std::size_t width, std::size_t anchor_factor) {
  const double anchors = static_cast<double>((tokens + anchor_factor - 1) / anchor_factor);
  const double t = static_cast<double>(tokens);
  const double d = static_cast<double>(width);
  // A K^T, Q A^T, M_d V, M_e Z: four products of t x anchors x d.
  return 4.0 * 2.0 * t * anchors * d;
}

double dense_attention_flops(std::size_t tokens, std::size_t width) {
  const double t = static_cast<double>(tokens);
  return 2.0 * 2.0 * t * t * static_cast<double>(width);
}

double fft_flops(std::size_t points) {
  const double n = static_cast<double>(points);
  return points > 1 ? 5.0 * n * std::log2(n) : 0.0;
}

double FlopReport::total() const {
  double t = 0.0;
  for (const auto& it : items) t += it.flops;
  return t;
}

double FlopReport::category(const std::string& name) const {
  double t = 0.0;
  for (const auto& it : items) {
    if (it.category == name) t += it.flops;
  }
  return t;
}

double FlopReport::level(std::size_t level) const {
  double t = 0.0;
  for (const auto& it : items) {
    if (it.level == level) t += it.flops;
  }
  return t;
}

FlopReport count_flops(const ModelConfig& c) {
  c.validate();
  FlopReport r;
  const std::size_t P = c.patch;
  const std::size_t HW = P * P;
  const auto& w = c.widths;
  const auto& h = c.ham;
  r.items.push_back({"hsi.stem", 1, "conv", conv_flops(c.hsi_channels, w[0], 1, HW)});
  std::size_t sar_in = c.sar_channels;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t C = w[i];
    const std::size_t L = i + 1;
    if (i > 0) r.items.push_back({"hsi.expand", L, "conv", conv_flops(w[i - 1], C, 1, HW)});
    if (c.use_ham) {
      if (h.use_global) {
        r.items.push_back({"ham.global.projections", L, "attention", 4.0 * linear_flops(C, C, HW)});
        r.items.push_back({"ham.global.products", L, "attention", anchored_attention_flops(HW, C, h.spatial_anchor)});
      }
      if (h.use_spectral) {
        r.items.push_back({"ham.spectral.projections", L, "attention",
                           3.0 * linear_flops(HW, h.spectral_width, C) + linear_flops(h.spectral_width, HW, C)});
        r.items.push_back({"ham.spectral.products", L, "attention",
                           anchored_attention_flops(C, h.spectral_width, h.spectral_anchor)});
      }
      if (h.use_local) {
        const double dw = 2.0 * static_cast<double>(C * h.local_kernel * h.local_kernel * HW);
        const std::size_t reduced = std::max<std::size_t>(1, C / h.reduction);
        r.items.push_back({"ham.local.depthwise", L, "conv", 2.0 * dw});
        r.items.push_back({"ham.local.channel_attention", L, "linear",
                           linear_flops(C, reduced) + linear_flops(reduced, C)});
      }
      r.items.push_back({"ham.ffn", L, "linear",
                         linear_flops(C, h.expansion * C, HW) + linear_flops(h.expansion * C, C, HW)});
    } else {
      r.items.push_back({"hsi.conv", L, "conv", conv_flops(C, C, 3, HW)});
    }
    r.items.push_back({"sar.conv", L, "conv", conv_flops(sar_in, C, 3, HW)});
    sar_in = C;
    if (c.use_pffm) {
      const std::size_t bins = P * (P / 2 + 1);
      r.items.push_back({"pffm.fft", L, "fft", 2.0 * static_cast<double>(C) * fft_flops(HW)});
      r.items.push_back({"pffm.spectral_product", L, "fft", 6.0 * static_cast<double>(C * bins)});
    }
  }
  r.items.push_back({"head", 0, "linear", linear_flops(w[0] + w[1] + w[2], c.hidden) + linear_flops(c.hidden, c.classes)});
  return r;
}

// -------------------------------------------------------- checkpoints

Precision parse_precision(const std::string& text) {
  if (text == "f64") return Precision::F64;
  if (text == "f32") return Precision::F32;
  throw ConfigError("precision must be f32 or f64, got '" + text + "'");
}

std::string to_string(Precision p) { return p == Precision::F64 ? "f64" : "f32"; }

void round_parameters_to_f32(ParameterStore& store) {
  for (auto& e : store.entries()) {
    for (double& v : e.tensor.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
}

namespace {

constexpr char kMagic[8] = {'H', 'A', 'P', 'N', 'E', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

template <class T>
T get(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int ch = is.get();
    if (ch == EOF) throw DataError("checkpoint: truncated file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(ch)) << (8 * i);
  }
  return static_cast<T>(v);
}

}  // namespace

std::uint64_t checkpoint_size(const HapNet& model, Precision precision) {
  const std::uint64_t bytes = precision == Precision::F64 ? 8 : 4;
  std::uint64_t size = sizeof(kMagic) + 4 + 8 + 4 + 4;
  for (const auto& e : model.parameters().entries()) {
    size += 4 + e.name.size() + 4 + 8 * e.tensor.rank() + bytes * e.tensor.numel();
  }
  return size;
}

void save_checkpoint(const HapNet& model, const std::filesystem::path& path, Precision precision) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot write " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, config_hash(model.config()));
  put<std::uint32_t>(os, precision == Precision::F64 ? 8 : 4);
  const auto& entries = model.parameters().entries();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape()) put<std::uint64_t>(os, d);
    for (double v : e.tensor.data()) {
      if (precision == Precision::F64) {
        put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
      } else {
        put<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  if (!os) throw DataError("checkpoint: write failed for " + path.string());
}

void load_checkpoint(HapNet& model, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path.string());
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError("checkpoint: bad magic bytes");
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto hash = get<std::uint64_t>(is);
  if (hash != config_hash(model.config())) {
    throw DataError("checkpoint: config hash mismatch (file was written for a different model configuration)");
  }
  const auto bytes = get<std::uint32_t>(is);
  if (bytes != 4 && bytes != 8) throw DataError("checkpoint: invalid value width " + std::to_string(bytes));
  auto& entries = model.parameters().entries();
  const auto count = get<std::uint32_t>(is);
  if (count != entries.size()) throw DataError("checkpoint: parameter count mismatch");
  // Decode everything before touching the model so a corrupt file leaves it intact.
  std::vector<std::vector<double>> staged(entries.size());
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const auto name_len = get<std::uint32_t>(is);
    if (name_len > 4096) throw DataError("checkpoint: corrupt parameter name");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is || name != entries[p].name) throw DataError("checkpoint: expected parameter '" + entries[p].name + "'");
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is);
    if (shape != entries[p].tensor.shape()) throw DataError("checkpoint: shape mismatch for '" + name + "'");
    staged[p].resize(numel(shape));
    for (double& v : staged[p]) {
      v = bytes == 8 ? std::bit_cast<double>(get<std::uint64_t>(is))
                     : static_cast<double>(std::bit_cast<float>(get<std::uint32_t>(is)));
    }
  }
  if (is.peek() != EOF) throw DataError("checkpoint: trailing bytes");
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto dst = entries[p].tensor.mutable_data();
    std::copy(staged[p].begin(), staged[p].end(), dst.begin());
  }
}

}  // namespace hapnet
