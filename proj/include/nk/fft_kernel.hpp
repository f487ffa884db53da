// Shared radix-2 FFT kernel. Both the plain DSP API and the autodiff
// primitives call this, so the two paths are bit-identical.
#pragma once

#include <cstddef>

namespace nk::detail {

// In-place iterative radix-2 transform on split re/im arrays. n must be a
// power of two. Forward is unnormalized; inverse applies the 1/n factor.
void fft_inplace(double* re, double* im, std::size_t n, bool inverse);

}  // namespace nk::detail
