#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "nk/signal.hpp"

using namespace nk;

namespace {

std::vector<double> noise(std::size_t n, unsigned salt) {
  std::vector<double> v(n);
  std::uint64_t s = 0x243f6a8885a308d3ull + salt;
  for (auto& x : v) {
    s ^= s << 13; s ^= s >> 7; s ^= s << 17;
    x = 2.0 * (double)(s >> 11) * 0x1.0p-53 - 1.0;
  }
  return v;
}

}  // namespace

TEST_CASE("impulse and zero spectra") {
  std::vector<double> imp(16, 0.0);
  imp[0] = 1.0;
  for (auto b : fft(imp)) {
    CHECK(b.real() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::fabs(b.imag()) < 1e-12);
  }
  for (auto b : fft(std::vector<double>(16, 0.0))) CHECK(std::abs(b) == 0.0);
}

TEST_CASE("fft linearity, Parseval, and inverse round trip") {
  auto u = noise(64, 1);
  auto v = noise(64, 2);
  auto fu = fft(u), fv = fft(v);
  std::vector<double> mix(64);
  for (std::size_t i = 0; i < 64; ++i) mix[i] = 0.7 * u[i] - 1.3 * v[i];
  auto fm = fft(mix);
  for (std::size_t i = 0; i < 64; ++i)
    CHECK(std::abs(fm[i] - (0.7 * fu[i] - 1.3 * fv[i])) < 1e-12);

  double te = 0.0, fe = 0.0;
  for (double x : u) te += x * x;
  for (auto b : fu) fe += std::norm(b);
  CHECK(te == doctest::Approx(fe / 64.0).epsilon(1e-12));

  auto back = ifft(fu);
  for (std::size_t i = 0; i < 64; ++i)
    CHECK(back[i] == doctest::Approx(u[i]).epsilon(1e-10));
}

TEST_CASE("fft rejects non power-of-two input") {
  CHECK_THROWS_AS(fft(std::vector<double>(12, 0.0)), ConfigError);
}

TEST_CASE("block config validation") {
  BlockConfig bad1{100, 512};
  CHECK_THROWS_AS(bad1.validate(), ConfigError);
  BlockConfig bad2{6, 12};
  CHECK_THROWS_AS(bad2.validate(), ConfigError);
  BlockConfig good{256, 512};
  CHECK_NOTHROW(good.validate());
  CHECK(good.bins() == 257);
}

TEST_CASE("keep-last projection zeroes the first half in time") {
  BlockConfig cfg{4, 8};
  std::vector<double> t = {1, 2, 3, 4, 5, 6, 7, 8};
  auto proj = project_keep_last(fft(t), cfg);
  auto back = ifft(proj);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::fabs(back[i]) < 1e-10);
  for (std::size_t i = 4; i < 8; ++i)
    CHECK(back[i] == doctest::Approx(t[i]).epsilon(1e-10));

  // idempotent; complementary with keep-first
  auto twice = project_keep_last(proj, cfg);
  auto first = project_keep_first(fft(t), cfg);
  auto orig = fft(t);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(std::abs(twice[i] - proj[i]) < 1e-10);
    CHECK(std::abs(proj[i] + first[i] - orig[i]) < 1e-10);
  }
}

TEST_CASE("keep-first projection fixes deltas as expected") {
  BlockConfig cfg{4, 8};
  std::vector<double> d0(8, 0.0), dend(8, 0.0);
  d0[0] = 1.0;
  dend[7] = 1.0;
  auto p0 = project_keep_first(fft(d0), cfg);
  auto f0 = fft(d0);
  for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(p0[i] - f0[i]) < 1e-12);
  for (auto b : project_keep_first(fft(dend), cfg)) CHECK(std::abs(b) < 1e-12);
}

TEST_CASE("keep-last removes the circular convolution tail") {
  // filter on the first R taps: bins j in [R, M) of the circular product
  // are pure linear convolution, which the projection keeps
  BlockConfig cfg{8, 16};
  auto x = noise(16, 3);
  auto w = noise(8, 4);
  std::vector<double> wpad(16, 0.0);
  for (std::size_t i = 0; i < 8; ++i) wpad[i] = w[i];

  auto prod = fft(x);
  auto wf = fft(wpad);
  for (std::size_t i = 0; i < 16; ++i) prod[i] *= wf[i];
  auto kept = ifft(project_keep_last(prod, cfg));

  for (std::size_t j = 0; j < 16; ++j) {
    double lin = 0.0;
    for (std::size_t tau = 0; tau < 8 && tau <= j; ++tau)
      lin += w[tau] * x[j - tau];
    if (j < 8) CHECK(std::fabs(kept[j]) < 1e-10);
    else CHECK(kept[j] == doctest::Approx(lin).epsilon(1e-10));
  }
}

TEST_CASE("one-sided conversion round-trips real-signal spectra") {
  auto x = noise(32, 5);
  auto full = fft(x);
  auto one = to_onesided(full);
  CHECK(one.size() == 17);
  auto back = to_full(one);
  for (std::size_t i = 0; i < 32; ++i) CHECK(std::abs(back[i] - full[i]) < 1e-12);
}

TEST_CASE("stft of a pure tone peaks at the expected bin") {
  // 1 kHz at 16 kHz with M=512: bin = 1000*512/16000 = 32
  TimeSignal x;
  x.sample_rate = 16000.0;
  x.samples.resize(4096);
  for (std::size_t n = 0; n < x.samples.size(); ++n)
    x.samples[n] = std::sin(2.0 * M_PI * 1000.0 * (double)n / 16000.0);
  auto frames = stft(x, BlockConfig{256, 512});
  REQUIRE(!frames.empty());
  for (const auto& f : frames) {
    std::size_t best = 0;
    for (std::size_t b = 1; b < 257; ++b)
      if (std::abs(f[b]) > std::abs(f[best])) best = b;
    CHECK(best == 32);
  }
}

TEST_CASE("stft/istft reconstructs the interior exactly enough") {
  TimeSignal x;
  x.sample_rate = 16000.0;
  x.samples = noise(8192, 6);
  BlockConfig cfg{256, 512};
  auto y = istft(stft(x, cfg), cfg, x.sample_rate);
  REQUIRE(y.samples.size() >= 8192 - 256);
  double err = 0.0, ref = 0.0;
  for (std::size_t n = 512; n + 512 < 8192; ++n) {
    err += (y.samples[n] - x.samples[n]) * (y.samples[n] - x.samples[n]);
    ref += x.samples[n] * x.samples[n];
  }
  CHECK(std::sqrt(err / ref) < 1e-8);
}

TEST_CASE("dc signal reconstructs and concentrates in bin zero") {
  TimeSignal x;
  x.samples.assign(2048, 1.0);
  BlockConfig cfg{256, 512};
  auto frames = stft(x, cfg);
  for (const auto& f : frames) {
    std::size_t best = 0;
    for (std::size_t b = 1; b < 257; ++b)
      if (std::abs(f[b]) > std::abs(f[best])) best = b;
    CHECK(best == 0);
  }
  auto y = istft(frames, cfg, x.sample_rate);
  for (std::size_t n = 512; n + 512 < y.samples.size(); ++n)
    CHECK(y.samples[n] == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("signals shorter than one frame produce no frames") {
  TimeSignal x;
  x.samples.assign(100, 0.5);
  CHECK(stft(x, BlockConfig{256, 512}).empty());
}

TEST_CASE("non-finite samples are rejected") {
  TimeSignal x;
  x.samples = {0.0, std::nan(""), 1.0};
  CHECK_THROWS_AS(x.validate(), ConfigError);
}
