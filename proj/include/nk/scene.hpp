// Synthetic echo scenes: image-source room impulse responses, loudspeaker
// nonlinearities, echo rendering with scheduled path changes, and
// SER-controlled near-end mixing.
#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "nk/rng.hpp"
#include "nk/signal.hpp"

namespace nk {

struct RoomSpec {
  std::array<double, 3> dimensions{5.0, 4.0, 3.0};  // meters
  std::array<double, 3> source_pos{1.0, 2.0, 1.2};
  std::array<double, 3> mic_pos{3.0, 2.0, 1.2};
  double rt60 = 0.3;              // seconds, paper range [0, 0.6]
  double speed_of_sound = 343.0;  // m/s
  double fs = 16000.0;

  void validate() const;
};

struct Rir {
  std::vector<double> taps;
  double fs = 16000.0;
};

struct NonlinearitySpec {
  enum class Kind { None, HardClip, Sigmoidal, Cascade };
  Kind kind = Kind::None;
  double x_max = 0.8;  // hard clip threshold, (0, 1]
  double gain = 1.0;   // sigmoidal output gain

  void validate() const;
};

struct EchoScene {
  TimeSignal farend;
  TimeSignal nearend;  // may be empty (echo-only scene)
  std::vector<std::pair<std::size_t, Rir>> rir_schedule;  // (start_sample, rir)
  NonlinearitySpec nonlinearity;
  double ser_db = 0.0;
  std::uint64_t seed = 0;
};

struct RenderedScene {
  TimeSignal mic;
  TimeSignal echo;
  TimeSignal nearend_aligned;  // SER-scaled, padded/cut to mic length
};

// Uniform wall reflection coefficient from Sabine's relation.
// Throws "room too small for target RT60" when absorption would reach 1.
double rt60_to_reflectivity(const RoomSpec& room);

// Image-source RIR. max_order caps the total reflection count per image
// (0 = direct path only); images beyond the RIR length never contribute,
// so a large max_order means "all audible images".
Rir image_source_rir(const RoomSpec& room, int max_order);

TimeSignal apply_nonlinearity(const TimeSignal& x, const NonlinearitySpec& spec);

// Echo via segment-wise convolution: at each scheduled change the delay
// line resets, so the previous path's tail is truncated (hard switch).
RenderedScene render_scene(const EchoScene& scene);

// ---- surrogate sources (desk-scale stand-ins for speech corpora)

TimeSignal gen_white(std::size_t n, double fs, double level, Rng& rng);
// lowpassed noise gated into bursts with cosine ramps
TimeSignal gen_noise_bursts(std::size_t n, double fs, double level, Rng& rng);
// AR(2) resonator excited by noise, resonance re-drawn per voiced segment
TimeSignal gen_ar2_speech(std::size_t n, double fs, double level, Rng& rng);

// random causal FIR with exponential tap decay, unit-normalized energy
Rir random_fir(std::size_t taps, double decay, double fs, Rng& rng);

}  // namespace nk
