// Objective evaluation: ERLE, filter misalignment, SI-SDR, reconvergence.
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nk/scene.hpp"
#include "nk/signal.hpp"

namespace nk {

struct EvalReport {
  std::vector<double> erle_curve;          // dB per processed frame
  std::vector<double> misalignment_curve;  // dB per processed frame
  double final_erle = 0.0;
  double si_sdr_in = 0.0;   // mic vs near-end target
  double si_sdr_out = 0.0;  // filter output vs near-end target
  std::optional<std::size_t> reconvergence_frames;  // after a path change
};

// scale-invariant SDR in dB, clamped to +-cap; both signals are
// mean-centered, the reference is scaled by the least-squares projection
double si_sdr_db(std::span<const double> estimate,
                 std::span<const double> reference, double cap = 30.0);

// 20 log10(||h - h_hat|| / ||h||) with h cut/padded to h_hat's length,
// floored at -100 dB
double misalignment_db(const std::vector<double>& true_taps,
                       const std::vector<double>& estimated_taps);

// Streaming ERLE: energies smoothed at 0.98, ratio capped at +80 dB.
// Frames flagged as double-talk freeze the smoother (ERLE is only
// meaningful on echo-only stretches).
class ErleTracker {
 public:
  double push(double mic_energy, double out_energy, bool echo_only);
  double current() const { return last_; }

 private:
  double sy_ = 0.0, se_ = 0.0, last_ = 0.0;
  bool seen_ = false;
};

// one R-block step of some echo canceller: (farend block, mic block) -> output
using BlockStepper = std::function<std::vector<double>(
    std::span<const double>, std::span<const double>)>;
// current time-domain echo-path estimate (R taps)
using PathProbe = std::function<std::vector<double>()>;

// Drives the stepper over a rendered scene and assembles the report.
// The schedule provides the ground-truth path per frame for misalignment
// and the change point for reconvergence (first frame at or after the
// change where misalignment <= -15 dB).
EvalReport evaluate(const TimeSignal& farend, const RenderedScene& rendered,
                    const std::vector<std::pair<std::size_t, Rir>>& schedule,
                    const BlockConfig& cfg, const BlockStepper& stepper,
                    const PathProbe& probe);

// rows: frame,erle_db,misalign_db
void write_metrics_csv(const std::string& path, const EvalReport& report);

}  // namespace nk
