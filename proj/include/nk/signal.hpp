// Block framing, FFT, overlap-save constraint projections, STFT/iSTFT.
// Plain (non-differentiable) counterparts of the tape primitives; both run
// on the same FFT kernel, so values agree bitwise.
#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "nk/common.hpp"
#include "nk/tensor.hpp"

namespace nk {

using cvec = std::vector<std::complex<double>>;

struct TimeSignal {
  std::vector<double> samples;
  double sample_rate = 16000.0;

  void validate() const;
};

// Frame geometry: hop R, transform size M = 2R.
struct BlockConfig {
  std::size_t hop = 256;
  std::size_t fft_size = 512;

  void validate() const;
  std::size_t bins() const { return fft_size / 2 + 1; }  // one-sided count
};

// complex<->[2,M] tensor conversions (row 0 real, row 1 imaginary)
Tensor complex_tensor(const cvec& v);
cvec complex_vec(const Tensor& t);

cvec fft(const std::vector<double>& block);  // length must be a power of two
std::vector<double> ifft(const cvec& spec);  // real part of the inverse

// Overlap-save constraints, as round trips through the time domain.
// keep_last zeroes the first R time samples (output constraint); keep_first
// zeroes the last M-R (weight constraint).
cvec project_keep_last(const cvec& spec, const BlockConfig& cfg);
cvec project_keep_first(const cvec& spec, const BlockConfig& cfg);

cvec to_onesided(const cvec& full);
cvec to_full(const cvec& onesided);

// sqrt-Hann analysis window of length M (synthesis uses the same window;
// the product pair sums to one at 50% overlap)
std::vector<double> sqrt_hann(std::size_t m);

// Frames of length M every R samples; a signal shorter than one frame
// yields no frames.
std::vector<cvec> stft(const TimeSignal& x, const BlockConfig& cfg);
TimeSignal istft(const std::vector<cvec>& frames, const BlockConfig& cfg,
                 double sample_rate);

}  // namespace nk
