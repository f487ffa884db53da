// Frequency-domain Kalman filter for echo cancellation, per-bin diagonal
// form, plus a constrained frequency-domain NLMS baseline.
//
// The filter runs over autodiff Vars: with no tape attached it evaluates
// eagerly (inference); with a tape it records the unrolled recursion so a
// loss on the output can backpropagate into anything injected through the
// per-frame overrides (learned transition factor, far-end reconstruction,
// state transition function, covariance estimates).
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "nk/signal.hpp"
#include "nk/tape.hpp"

namespace nk {

struct FdkfConfig {
  BlockConfig block;
  double a_default = 0.999;        // transition factor A
  double psi_vv_smoothing = 0.9;   // EMA on |S_hat|^2 for observation noise
  double p_init = 10.0;            // initial per-bin state covariance
  double delta = 1e-10;            // gain denominator regularizer
  double psi_dd_smoothing = 0.0;   // EMA on |W|^2 for process noise (0 = off)
  enum class UpdateProjection { KeepFirst, KeepLast };
  UpdateProjection update_projection = UpdateProjection::KeepFirst;

  void validate() const;
};

// Per-frame neural injections. Every field is optional; an empty struct
// gives the classical filter.
struct FdkfOverrides {
  std::optional<Var> a;            // transition factor for this frame, [1]
  std::optional<Var> x_hat;        // replaces the far-end spectrum, [2,M]
  std::function<Var(const Var&)> transition;  // t(.) applied to the updated W
  std::optional<Var> psi_vv;       // observation-noise covariance, [M]
  std::optional<Var> psi_dd;       // process-noise covariance, [M]
};

struct FdkfDiag {
  double a_used = 0.0;
  double k_norm = 0.0;        // ||K|| over bins
  double mic_energy = 0.0;    // sum of squares of the R mic samples
  double out_energy = 0.0;    // sum of squares of the R output samples
};

class FdkfFilter {
 public:
  explicit FdkfFilter(const FdkfConfig& cfg, Tape* tape = nullptr);

  // Consume R far-end and R mic samples, return the R-sample near-end
  // estimate (last half of the inverse-transformed residual spectrum).
  Var step(std::span<const double> farend, std::span<const double> mic,
           const FdkfOverrides& ov = {}, FdkfDiag* diag = nullptr);

  // The three stages, exposed for contract-level tests. predict/gain do not
  // mutate; update commits new state (or throws DivergedError leaving the
  // state frozen).
  Var predict(const Var& x, const Var& y) const;  // S_hat = Y - G01(X o W)
  Var gain(const Var& x, const Var& psi_vv) const;
  void update(const Var& k_gain, const Var& s_hat, const Var& x,
              const FdkfOverrides& ov);

  const FdkfConfig& config() const { return cfg_; }
  const Var& w() const { return w_; }
  const Var& p() const { return p_; }
  const Var& psi_vv() const { return psi_vv_; }
  std::size_t frame_index() const { return k_; }
  const std::vector<double>& farend_buffer() const { return x_buf_; }

  // first R taps of the inverse-transformed weight vector (real part)
  std::vector<double> echo_path_estimate() const;

  void set_weights(Tensor w);  // [2,M] warm start / oracle injection
  void reset();

 private:
  Var wrap(Tensor t) const;  // tape constant / detached value

  FdkfConfig cfg_;
  Tape* tape_;
  std::vector<double> x_buf_;  // most recent M far-end samples
  Var w_;                      // [2,M] weight spectrum
  Var p_;                      // [M] state covariance
  Var psi_vv_;                 // [M] observation-noise covariance
  Var psi_dd_cov_;             // [M] smoothed |W|^2 (when smoothing is on)
  std::size_t k_ = 0;
};

struct NlmsConfig {
  BlockConfig block;
  double mu = 0.5;               // step size, [0, 2)
  double delta = 1e-10;
  double power_smoothing = 0.9;  // EMA on |X|^2

  void validate() const;
};

class NlmsFilter {
 public:
  explicit NlmsFilter(const NlmsConfig& cfg);

  std::vector<double> step(std::span<const double> farend,
                           std::span<const double> mic);

  const cvec& w() const { return w_; }
  std::vector<double> echo_path_estimate() const;

 private:
  NlmsConfig cfg_;
  std::vector<double> x_buf_;
  cvec w_;
  std::vector<double> power_;
};

}  // namespace nk
