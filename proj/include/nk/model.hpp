// Model configuration, named weight storage, and the NKWT weights file.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nk/tape.hpp"
#include "nk/tensor.hpp"

namespace nk {

// which learned components are active; `fdkf` is the classical filter
enum class Variant {
  Fdkf,
  A,
  G,
  G_A,
  G_T,
  G_T_A,
  G_Psi_A,
  G_Psi_T_A,
};

Variant parse_variant(const std::string& name);  // e.g. "g_t_A"
std::string variant_name(Variant v);
bool variant_uses_a(Variant v);
bool variant_uses_g(Variant v);
bool variant_uses_t(Variant v);
bool variant_uses_psi(Variant v);

struct ModelConfig {
  std::size_t n_bins = 33;  // fft_size/2 + 1
  std::size_t lstm_layers = 2;
  std::size_t lstm_hidden = 32;
  std::size_t t_lstm_hidden = 32;
  std::size_t crf_time_taps = 3;  // causal: current frame + past
  std::size_t crf_freq_taps = 3;  // odd, centred on the bin
  std::size_t crf_conv_kernel = 3;
  std::size_t feature_proj_dim = 32;

  static ModelConfig desk();
  static ModelConfig paper();
  void validate() const;

  std::size_t crf_channels() const {
    return 2 * crf_time_taps * crf_freq_taps;
  }
  // every tensor the full model owns, name -> shape (all heads, all variants)
  std::map<std::string, std::vector<std::size_t>> expected_shapes() const;
};

struct ModelWeights {
  std::uint32_t version = 1;
  std::map<std::string, Tensor> tensors;  // ordered by name
};

// deterministic initialization: identity-like heads so an untrained model
// with the g/A hooks behaves like the classical filter
ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed);

void save_weights(const ModelWeights& w, const std::string& path);
ModelWeights load_weights(const std::string& path, const ModelConfig& cfg);

// tape leaves (trainable) or detached constants (inference) per tensor
using WeightsView = std::map<std::string, Var>;
WeightsView weights_view(const ModelWeights& w, Tape* tape);
// write the (updated) leaf values back into storage
void assign_from_view(ModelWeights& w, const WeightsView& view);

}  // namespace nk
