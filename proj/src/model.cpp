#include "nk/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "nk/common.hpp"
#include "nk/neural.hpp"
#include "nk/rng.hpp"

namespace nk {

Variant parse_variant(const std::string& name) {
  if (name == "fdkf") return Variant::Fdkf;
  if (name == "A") return Variant::A;
  if (name == "g") return Variant::G;
  if (name == "g_A") return Variant::G_A;
  if (name == "g_t") return Variant::G_T;
  if (name == "g_t_A") return Variant::G_T_A;
  if (name == "g_psi_A") return Variant::G_Psi_A;
  if (name == "g_psi_t_A") return Variant::G_Psi_T_A;
  throw ConfigError("unknown variant '" + name +
                    "' (expected one of: fdkf, A, g, g_A, g_t, g_t_A, "
                    "g_psi_A, g_psi_t_A)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Fdkf: return "fdkf";
    case Variant::A: return "A";
    case Variant::G: return "g";
    case Variant::G_A: return "g_A";
    case Variant::G_T: return "g_t";
    case Variant::G_T_A: return "g_t_A";
    case Variant::G_Psi_A: return "g_psi_A";
    case Variant::G_Psi_T_A: return "g_psi_t_A";
  }
  throw ConfigError("bad variant value");
}

bool variant_uses_a(Variant v) {
  return v == Variant::A || v == Variant::G_A || v == Variant::G_T_A ||
         v == Variant::G_Psi_A || v == Variant::G_Psi_T_A;
}
bool variant_uses_g(Variant v) {
  return v != Variant::Fdkf && v != Variant::A;
}
bool variant_uses_t(Variant v) {
  return v == Variant::G_T || v == Variant::G_T_A || v == Variant::G_Psi_T_A;
}
bool variant_uses_psi(Variant v) {
  return v == Variant::G_Psi_A || v == Variant::G_Psi_T_A;
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.n_bins = 257;
  c.lstm_layers = 4;
  c.lstm_hidden = 257;
  c.t_lstm_hidden = 256;
  c.feature_proj_dim = 257;
  return c;
}

void ModelConfig::validate() const {
  if (n_bins < 2) throw ConfigError("ModelConfig: n_bins must be >= 2");
  if (lstm_layers < 1 || lstm_hidden < 1 || t_lstm_hidden < 1 ||
      feature_proj_dim < 1)
    throw ConfigError("ModelConfig: layer sizes must be >= 1");
  if (crf_time_taps < 1) throw ConfigError("ModelConfig: crf_time_taps >= 1");
  if (crf_freq_taps < 1 || crf_freq_taps % 2 == 0)
    throw ConfigError("ModelConfig: crf_freq_taps must be odd and >= 1");
  if (crf_conv_kernel < 1 || crf_conv_kernel % 2 == 0)
    throw ConfigError("ModelConfig: crf_conv_kernel must be odd and >= 1");
}

std::map<std::string, std::vector<std::size_t>> ModelConfig::expected_shapes()
    const {
  const std::size_t f = n_bins, h = lstm_hidden, p = feature_proj_dim;
  const std::size_t t = t_lstm_hidden, c = crf_channels(), k = crf_conv_kernel;
  std::map<std::string, std::vector<std::size_t>> s;
  s["feat.proj.w"] = {p, 10 * f};
  s["feat.proj.b"] = {p};
  for (std::size_t l = 0; l < lstm_layers; ++l) {
    const std::string base = "shared.l" + std::to_string(l) + ".";
    s[base + "wx"] = {4 * h, l == 0 ? p : h};
    s[base + "wh"] = {4 * h, h};
    s[base + "b"] = {4 * h};
  }
  s["head.a.w"] = {1, h};
  s["head.a.b"] = {1};
  s["head.g.proj.w"] = {c * f, h};
  s["head.g.proj.b"] = {c * f};
  s["head.g.conv1.w"] = {c, c, k};
  s["head.g.conv1.b"] = {c};
  s["head.g.conv2.w"] = {c, c, k};
  s["head.g.conv2.b"] = {c};
  for (const char* head : {"head.t.", "head.psi_vv.", "head.psi_dd."}) {
    const std::string base = head;
    s[base + "in.w"] = {t, 2 * f};
    s[base + "in.b"] = {t};
    s[base + "lstm.wx"] = {4 * t, t};
    s[base + "lstm.wh"] = {4 * t, t};
    s[base + "lstm.b"] = {4 * t};
  }
  s["head.t.re.w"] = {f, t};
  s["head.t.re.b"] = {f};
  s["head.t.im.w"] = {f, t};
  s["head.t.im.b"] = {f};
  s["head.psi_vv.out.w"] = {f, t};
  s["head.psi_vv.out.b"] = {f};
  s["head.psi_dd.out.w"] = {f, t};
  s["head.psi_dd.out.b"] = {f};
  return s;
}

namespace {

std::size_t fan_in(const std::vector<std::size_t>& shape) {
  if (shape.size() == 2) return shape[1];
  if (shape.size() == 3) return shape[1] * shape[2];  // conv: Cin * K
  return shape[0];
}

}  // namespace

ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelWeights w;
  for (const auto& [name, shape] : cfg.expected_shapes()) {
    Tensor t(shape);
    const bool bias = name.ends_with(".b");
    if (!bias) {
      double s = 1.0 / std::sqrt((double)fan_in(shape));
      if (name == "head.g.conv2.w") s = 0.0;  // identity cRF start
      if (name == "head.t.re.w" || name == "head.t.im.w") s *= 0.01;
      for (auto& v : t.data) v = s * (2.0 * rng.uniform() - 1.0);
    } else {
      // forget-gate bias +1 for all LSTM cells (slots [H, 2H))
      if (name.ends_with("lstm.b") ||
          (name.starts_with("shared.") && name.ends_with(".b"))) {
        const std::size_t h4 = shape[0], h = h4 / 4;
        for (std::size_t i = h; i < 2 * h; ++i) t.data[i] = 1.0;
      }
      if (name == "head.a.b")
        t.data[0] = std::log(0.999 / (1.0 - 0.999));  // sigmoid -> 0.999
      if (name == "head.g.conv2.b") {
        // centre time tap, centre frequency tap, real part = 1
        const std::size_t centre = (cfg.crf_freq_taps - 1) / 2;
        t.data[2 * centre] = 1.0;
      }
      // keep the learned covariances near the closed-form magnitudes
      if (name == "head.psi_vv.out.b")
        for (auto& v : t.data) v = 1.0;
      if (name == "head.psi_dd.out.b")
        for (auto& v : t.data) v = -6.0;
    }
    w.tensors.emplace(name, std::move(t));
  }

  // The transition head replaces the filter weights outright, so a random
  // start would erase the classical update every frame.  The constrained
  // spectrum it sees is conjugate-symmetric with time support in the first
  // hop taps -- exactly n_bins-1 real degrees of freedom.  When the head
  // width matches that count, wire it as inverse DFT -> near-linear LSTM ->
  // forward DFT so the whole head starts as the identity map: the engine's
  // fixed pre/post attenuation keeps the cell tanh in its linear region,
  // saturated input/output gates and a closed forget gate make the cell
  // pass-through, and the output rows undo the gate attenuation.
  if (cfg.t_lstm_hidden == cfg.n_bins - 1) {
    const std::size_t f = cfg.n_bins;
    const std::size_t r = cfg.t_lstm_hidden;
    const double m = 2.0 * (double)r;
    const double beta = 8.0;
    const double gate = 1.0 / (1.0 + std::exp(-beta));
    const double two_pi = 2.0 * std::acos(-1.0);

    Tensor& inw = w.tensors.at("head.t.in.w");
    Tensor& wx = w.tensors.at("head.t.lstm.wx");
    Tensor& lb = w.tensors.at("head.t.lstm.b");
    Tensor& rew = w.tensors.at("head.t.re.w");
    Tensor& imw = w.tensors.at("head.t.im.w");
    for (const char* n : {"head.t.in.b", "head.t.lstm.wh", "head.t.re.b",
                          "head.t.im.b"}) {
      auto& d = w.tensors.at(n).data;
      std::fill(d.begin(), d.end(), 0.0);
    }
    std::fill(wx.data.begin(), wx.data.end(), 0.0);
    for (std::size_t j = 0; j < r; ++j) wx.data[(2 * r + j) * r + j] = 1.0;
    for (std::size_t j = 0; j < 4 * r; ++j) {
      const std::size_t slot = j / r;  // input, forget, cell, output
      lb.data[j] = slot == 2 ? 0.0 : (slot == 1 ? -beta : beta);
    }
    const double undo =
        1.0 / (kTransitionPreScale * kTransitionPostScale * gate * gate);
    for (std::size_t tap = 0; tap < r; ++tap) {
      for (std::size_t k = 0; k < f; ++k) {
        const double ang = two_pi * (double)(k * tap) / m;
        double re, im;
        if (k == 0) {
          re = 1.0 / m;
          im = 0.0;
        } else if (k == f - 1) {
          re = (tap % 2 ? -1.0 : 1.0) / m;
          im = 0.0;
        } else {
          re = 2.0 * std::cos(ang) / m;
          im = -2.0 * std::sin(ang) / m;
        }
        inw.data[tap * 2 * f + k] = re;
        inw.data[tap * 2 * f + f + k] = im;
        rew.data[k * r + tap] = std::cos(ang) * undo;
        imw.data[k * r + tap] = -std::sin(ang) * undo;
      }
    }
  }
  return w;
}

namespace {

template <class T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::ifstream& f, const std::string& path) {
  T v;
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw IoError("weights file truncated: " + path);
  return v;
}

}  // namespace

void save_weights(const ModelWeights& w, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write weights file: " + path);
  f.write("NKWT", 4);
  put<std::uint32_t>(f, w.version);
  put<std::uint32_t>(f, (std::uint32_t)w.tensors.size());
  for (const auto& [name, t] : w.tensors) {
    put<std::uint32_t>(f, (std::uint32_t)name.size());
    f.write(name.data(), (std::streamsize)name.size());
    put<std::uint8_t>(f, (std::uint8_t)t.shape.size());
    for (std::size_t d : t.shape) put<std::uint64_t>(f, d);
    for (double v : t.data) put<float>(f, (float)v);
  }
  if (!f) throw IoError("weights write failed: " + path);
}

ModelWeights load_weights(const std::string& path, const ModelConfig& cfg) {
  cfg.validate();
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open weights file: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "NKWT", 4) != 0)
    throw IoError("not a weights file (bad magic): " + path);
  ModelWeights w;
  w.version = take<std::uint32_t>(f, path);
  if (w.version != 1)
    throw IoError("unsupported weights version " + std::to_string(w.version) +
                  ": " + path);
  const auto count = take<std::uint32_t>(f, path);
  auto expected = cfg.expected_shapes();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = take<std::uint32_t>(f, path);
    if (name_len > 4096) throw IoError("weights name too long: " + path);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (!f) throw IoError("weights file truncated: " + path);
    const auto rank = take<std::uint8_t>(f, path);
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = (std::size_t)take<std::uint64_t>(f, path);
      if (d == 0 || numel > (1u << 28) / std::max<std::size_t>(d, 1))
        throw IoError("implausible tensor shape for '" + name + "': " + path);
      numel *= d;
    }
    auto it = expected.find(name);
    if (it == expected.end())
      throw IoError("unexpected tensor '" + name + "' in " + path);
    if (it->second != shape)
      throw IoError("tensor '" + name + "' has the wrong shape in " + path);
    Tensor t(shape);
    for (auto& v : t.data) v = (double)take<float>(f, path);
    if (!t.all_finite())
      throw IoError("tensor '" + name + "' holds non-finite values: " + path);
    if (!w.tensors.emplace(name, std::move(t)).second)
      throw IoError("duplicate tensor '" + name + "' in " + path);
  }
  for (const auto& [name, shape] : expected)
    if (!w.tensors.count(name))
      throw IoError("missing tensor '" + name + "' in " + path);
  return w;
}

WeightsView weights_view(const ModelWeights& w, Tape* tape) {
  WeightsView view;
  for (const auto& [name, t] : w.tensors)
    view.emplace(name, tape ? tape->leaf(t) : Var::detached(t));
  return view;
}

void assign_from_view(ModelWeights& w, const WeightsView& view) {
  for (auto& [name, t] : w.tensors) {
    auto it = view.find(name);
    if (it == view.end()) throw ConfigError("view missing tensor " + name);
    t = it->second.v();
  }
}

}  // namespace nk
