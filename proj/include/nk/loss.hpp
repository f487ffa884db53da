// Training objective: negative scale-invariant SDR plus a weighted mean
// absolute error between one-sided magnitude spectra, both differentiable
// through the tape.
#pragma once

#include <span>

#include "nk/signal.hpp"
#include "nk/tape.hpp"

namespace nk {

struct LossConfig {
  double alpha = 10000.0;    // weight of the magnitude term
  double si_sdr_cap = 30.0;  // dB clamp on the ratio term

  void validate() const;
};

// plain copies of the loss pieces, for logging and recomputation checks
struct LossParts {
  double total = 0.0;
  double si_sdr = 0.0;   // clamped, before negation
  double mag_mae = 0.0;  // unweighted
};

// Differentiable SI-SDR of the estimate against a fixed reference, in dB,
// mean-centred and clamped to +-cap. The reference must carry energy.
Var si_sdr_loss(const Var& est, std::span<const double> reference, double cap);

// Full objective over a whole utterance. The estimate is the concatenation
// of the per-frame filter outputs; both signals are framed into zero-padded
// half-blocks (the filter's measurement layout) for the magnitude term.
Var training_loss(const Var& est, std::span<const double> target,
                  const BlockConfig& blk, const LossConfig& cfg,
                  LossParts* parts = nullptr);

}  // namespace nk
