#include "nk/fft_kernel.hpp"

#include <cmath>
#include <vector>

namespace nk::detail {

void fft_inplace(double* re, double* im, std::size_t n, bool inverse) {
  if (n <= 1) return;

  // Bit-reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }

  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * M_PI / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (std::size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::size_t u = i + k, v = i + k + len / 2;
        const double tr = re[v] * cr - im[v] * ci;
        const double ti = re[v] * ci + im[v] * cr;
        re[v] = re[u] - tr;
        im[v] = im[u] - ti;
        re[u] += tr;
        im[u] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }

  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      re[i] *= inv;
      im[i] *= inv;
    }
  }
}

}  // namespace nk::detail
