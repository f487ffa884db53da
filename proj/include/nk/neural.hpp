// Learned components: shared feature RNN, the A / g(cRF) / t / psi heads,
// and the engine that wires them into the frequency-domain Kalman filter.
#pragma once

#include <span>
#include <vector>

#include "nk/fdkf.hpp"
#include "nk/model.hpp"

namespace nk {

// y = W x + b with tensors named base+".w" / base+".b"
Var linear_forward(const WeightsView& w, const std::string& base,
                   const Var& x);

struct LstmState {
  Var h, c;
};

// one step of a standard LSTM cell; gate layout along rows: i, f, g, o
LstmState lstm_cell(const Var& wx, const Var& wh, const Var& b, const Var& x,
                    const LstmState& prev);

// fixed attenuation around the transition head: the spectrum is shrunk
// before the input layer and re-amplified after the output layers, so the
// cell tanh works in its linear region while the learnable weights stay at
// unit scale (a uniform optimizer step then cannot wreck the head)
inline constexpr double kTransitionPreScale = 0.25;
inline constexpr double kTransitionPostScale = 4.0;

// same-length 1-D convolution over the frequency axis plus per-channel bias
Var conv1d_forward(const Var& x, const Var& w, const Var& b);

// running normalization statistics and one-frame history for the features
struct FeatureState {
  Var y_prev, x_prev;                  // [2, F]
  Var mean_y, m2_y, mean_x, m2_x;      // [F] log-power running stats
  bool seen = false;
};

// per-bin [nlp(Y), nlp(X), temporal corr Y, temporal corr X, frequency
// corr Y, channel corr (Y,X)] with complex correlations split Re/Im,
// flattened feature-major to [10 F] and projected to feature_proj_dim
Var extract_features(const Var& y_os, const Var& x_os, FeatureState& state,
                     const WeightsView& w, Tape* tape);

struct EngineConfig {
  FdkfConfig fdkf;
  ModelConfig model;
  Variant variant = Variant::Fdkf;
  bool crf_on_mic = false;  // cRF reference: far end (default) or mic
  void validate() const;
};

struct StepTrace {
  double a_hat = 0.0;
  double mic_energy = 0.0;
  double out_energy = 0.0;
  double k_norm = 0.0;
};

// Drives the Kalman filter stage by stage each frame, injecting whichever
// learned overrides the variant enables.  With variant `fdkf` the step is
// bit-identical to the classical filter.
class NeuralKalmanEngine {
 public:
  NeuralKalmanEngine(const EngineConfig& cfg, WeightsView weights,
                     Tape* tape = nullptr);

  Var step(std::span<const double> farend, std::span<const double> mic,
           StepTrace* trace = nullptr);

  const FdkfFilter& filter() const { return filt_; }
  std::vector<double> echo_path_estimate() const {
    return filt_.echo_path_estimate();
  }
  std::size_t frame_index() const { return frame_; }
  void reset();

 private:
  Var wrap(Tensor t) const;
  Var zeros(std::size_t n) const;
  Var complex_rows(const Var& re, const Var& im) const;
  Var shift_bins(const Var& spec, std::ptrdiff_t offset) const;
  Var crf_farend(const Var& h_top);
  Var psi_head(const char* base, LstmState& state, const Var& spec_full);

  EngineConfig cfg_;
  Tape* tape_;
  WeightsView w_;
  FdkfFilter filt_;
  std::vector<double> xbuf_;
  FeatureState feat_;
  std::vector<LstmState> shared_;
  LstmState t_state_, vv_state_, dd_state_;
  std::vector<Var> ref_win_;  // [time tap] most recent first
  std::size_t frame_ = 0;
};

}  // namespace nk
