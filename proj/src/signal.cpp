#include "nk/signal.hpp"

#include <cmath>

#include "nk/fft_kernel.hpp"

namespace nk {

void TimeSignal::validate() const {
  if (!(sample_rate > 0.0))
    throw ConfigError("TimeSignal: sample rate must be positive");
  for (double v : samples)
    if (!std::isfinite(v)) throw ConfigError("TimeSignal: non-finite sample");
}

void BlockConfig::validate() const {
  if (fft_size != 2 * hop)
    throw ConfigError("BlockConfig: fft size must be twice the hop");
  if (!is_pow2(fft_size))
    throw ConfigError("BlockConfig: fft size must be a power of two");
}

Tensor complex_tensor(const cvec& v) {
  Tensor t({2, v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) {
    t.data[i] = v[i].real();
    t.data[v.size() + i] = v[i].imag();
  }
  return t;
}

cvec complex_vec(const Tensor& t) {
  if (t.shape.size() != 2 || t.shape[0] != 2)
    throw ConfigError("complex_vec: expected a [2,M] tensor");
  const std::size_t m = t.shape[1];
  cvec v(m);
  for (std::size_t i = 0; i < m; ++i) v[i] = {t.data[i], t.data[m + i]};
  return v;
}

namespace {

void run_fft(std::vector<double>& re, std::vector<double>& im, bool inverse) {
  if (!is_pow2(re.size()))
    throw ConfigError("fft: length must be a power of two");
  detail::fft_inplace(re.data(), im.data(), re.size(), inverse);
}

}  // namespace

cvec fft(const std::vector<double>& block) {
  std::vector<double> re = block, im(block.size(), 0.0);
  run_fft(re, im, false);
  cvec out(block.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {re[i], im[i]};
  return out;
}

std::vector<double> ifft(const cvec& spec) {
  std::vector<double> re(spec.size()), im(spec.size());
  for (std::size_t i = 0; i < spec.size(); ++i) {
    re[i] = spec[i].real();
    im[i] = spec[i].imag();
  }
  run_fft(re, im, true);
  return re;
}

namespace {

cvec project(const cvec& spec, const BlockConfig& cfg, bool keep_first) {
  cfg.validate();
  if (spec.size() != cfg.fft_size)
    throw ConfigError("projection: spectrum length does not match config");
  std::vector<double> re(spec.size()), im(spec.size());
  for (std::size_t i = 0; i < spec.size(); ++i) {
    re[i] = spec[i].real();
    im[i] = spec[i].imag();
  }
  run_fft(re, im, true);
  const std::size_t r = cfg.hop, m = cfg.fft_size;
  if (keep_first)
    for (std::size_t i = r; i < m; ++i) re[i] = im[i] = 0.0;
  else
    for (std::size_t i = 0; i < r; ++i) re[i] = im[i] = 0.0;
  run_fft(re, im, false);
  cvec out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = {re[i], im[i]};
  return out;
}

}  // namespace

cvec project_keep_last(const cvec& spec, const BlockConfig& cfg) {
  return project(spec, cfg, false);
}

cvec project_keep_first(const cvec& spec, const BlockConfig& cfg) {
  return project(spec, cfg, true);
}

cvec to_onesided(const cvec& full) {
  if (full.size() % 2 != 0 || full.size() < 2)
    throw ConfigError("to_onesided: full spectrum length must be even");
  return cvec(full.begin(),
              full.begin() + static_cast<std::ptrdiff_t>(full.size() / 2 + 1));
}

cvec to_full(const cvec& onesided) {
  if (onesided.size() < 2)
    throw ConfigError("to_full: need at least 2 bins");
  const std::size_t m = 2 * (onesided.size() - 1);
  cvec full(m);
  for (std::size_t i = 0; i < onesided.size(); ++i) full[i] = onesided[i];
  full[0] = {onesided[0].real(), 0.0};
  full[onesided.size() - 1] = {onesided.back().real(), 0.0};
  for (std::size_t i = 1; i + 1 < onesided.size(); ++i)
    full[m - i] = std::conj(onesided[i]);
  return full;
}

std::vector<double> sqrt_hann(std::size_t m) {
  std::vector<double> w(m);
  for (std::size_t n = 0; n < m; ++n)
    w[n] = std::sqrt(0.5 * (1.0 - std::cos(2.0 * M_PI * (double)n / (double)m)));
  return w;
}

std::vector<cvec> stft(const TimeSignal& x, const BlockConfig& cfg) {
  cfg.validate();
  x.validate();
  const std::size_t m = cfg.fft_size, r = cfg.hop;
  std::vector<cvec> frames;
  if (x.samples.size() < m) return frames;
  const std::vector<double> w = sqrt_hann(m);
  const std::size_t n_frames = (x.samples.size() - m) / r + 1;
  frames.reserve(n_frames);
  std::vector<double> block(m);
  for (std::size_t t = 0; t < n_frames; ++t) {
    for (std::size_t n = 0; n < m; ++n) block[n] = w[n] * x.samples[t * r + n];
    frames.push_back(fft(block));
  }
  return frames;
}

TimeSignal istft(const std::vector<cvec>& frames, const BlockConfig& cfg,
                 double sample_rate) {
  cfg.validate();
  const std::size_t m = cfg.fft_size, r = cfg.hop;
  TimeSignal out;
  out.sample_rate = sample_rate;
  if (frames.empty()) return out;
  const std::vector<double> w = sqrt_hann(m);
  out.samples.assign(m + (frames.size() - 1) * r, 0.0);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    if (frames[t].size() != m)
      throw ConfigError("istft: frame length does not match config");
    std::vector<double> block = ifft(frames[t]);
    for (std::size_t n = 0; n < m; ++n) out.samples[t * r + n] += w[n] * block[n];
  }
  return out;
}

}  // namespace nk
