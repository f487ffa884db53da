#include "nk/scene.hpp"

#include <algorithm>
#include <cmath>

namespace nk {

void RoomSpec::validate() const {
  for (double d : dimensions)
    if (!(d > 0.0)) throw ConfigError("RoomSpec: dimensions must be positive");
  for (int i = 0; i < 3; ++i) {
    if (!(source_pos[i] > 0.0 && source_pos[i] < dimensions[i]))
      throw ConfigError("RoomSpec: source position outside the room");
    if (!(mic_pos[i] > 0.0 && mic_pos[i] < dimensions[i]))
      throw ConfigError("RoomSpec: mic position outside the room");
  }
  if (!(rt60 >= 0.0 && rt60 <= 0.6))
    throw ConfigError("RoomSpec: rt60 must lie in [0, 0.6] seconds");
  if (!(speed_of_sound > 0.0) || !(fs > 0.0))
    throw ConfigError("RoomSpec: speed of sound and sample rate must be positive");
}

void NonlinearitySpec::validate() const {
  if (!(x_max > 0.0 && x_max <= 1.0))
    throw ConfigError("NonlinearitySpec: clip threshold must lie in (0, 1]");
  if (!std::isfinite(gain))
    throw ConfigError("NonlinearitySpec: gain must be finite");
}

double rt60_to_reflectivity(const RoomSpec& room) {
  room.validate();
  if (!(room.rt60 > 0.0))
    throw ConfigError("rt60_to_reflectivity: needs rt60 > 0");
  const double v = room.dimensions[0] * room.dimensions[1] * room.dimensions[2];
  const double s = 2.0 * (room.dimensions[0] * room.dimensions[1] +
                          room.dimensions[0] * room.dimensions[2] +
                          room.dimensions[1] * room.dimensions[2]);
  const double alpha = 0.161 * v / (room.rt60 * s);
  if (alpha >= 1.0) throw ConfigError("room too small for target RT60");
  return std::min(std::sqrt(1.0 - alpha), 0.999);
}

Rir image_source_rir(const RoomSpec& room, int max_order) {
  room.validate();
  if (max_order < 0) throw ConfigError("image_source_rir: max_order must be >= 0");

  const double c = room.speed_of_sound, fs = room.fs;
  double d2 = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double d = room.source_pos[i] - room.mic_pos[i];
    d2 += d * d;
  }
  const double d_direct = std::sqrt(d2);
  if (d_direct < 1e-9)
    throw ConfigError("image_source_rir: source and microphone coincide");

  const std::size_t direct_idx = (std::size_t)std::lround(d_direct * fs / c);
  const std::size_t nsamp =
      std::max((std::size_t)std::ceil(room.rt60 * fs), direct_idx + 1);
  const double beta = room.rt60 > 0.0 ? rt60_to_reflectivity(room) : 0.0;

  Rir rir;
  rir.fs = fs;
  rir.taps.assign(nsamp, 0.0);

  const double reach = (double)nsamp * c / fs;  // farthest audible image
  long n[3];
  for (int i = 0; i < 3; ++i) {
    long by_dist = (long)std::ceil(reach / (2.0 * room.dimensions[i]));
    long by_order = (long)((max_order + 1) / 2);
    n[i] = beta > 0.0 ? std::min(by_dist, by_order) : 0;
  }

  for (long mx = -n[0]; mx <= n[0]; ++mx)
    for (long my = -n[1]; my <= n[1]; ++my)
      for (long mz = -n[2]; mz <= n[2]; ++mz)
        for (int q = 0; q <= 1; ++q)
          for (int j = 0; j <= 1; ++j)
            for (int k = 0; k <= 1; ++k) {
              const long order = std::labs(2 * mx - q) + std::labs(2 * my - j) +
                                 std::labs(2 * mz - k);
              if (order > max_order) continue;
              const double px = 2.0 * (double)mx * room.dimensions[0] +
                                (1 - 2 * q) * room.source_pos[0] - room.mic_pos[0];
              const double py = 2.0 * (double)my * room.dimensions[1] +
                                (1 - 2 * j) * room.source_pos[1] - room.mic_pos[1];
              const double pz = 2.0 * (double)mz * room.dimensions[2] +
                                (1 - 2 * k) * room.source_pos[2] - room.mic_pos[2];
              const double dist = std::sqrt(px * px + py * py + pz * pz);
              const std::size_t idx = (std::size_t)std::lround(dist * fs / c);
              if (idx >= nsamp) continue;
              const long refl = std::labs(mx - q) + std::labs(mx) +
                                std::labs(my - j) + std::labs(my) +
                                std::labs(mz - k) + std::labs(mz);
              const double b = refl == 0 ? 1.0 : std::pow(beta, (double)refl);
              rir.taps[idx] += b / (4.0 * M_PI * dist);
            }
  return rir;
}

TimeSignal apply_nonlinearity(const TimeSignal& x, const NonlinearitySpec& spec) {
  x.validate();
  spec.validate();
  auto clip = [&](double v) {
    return v < 0.0 ? -std::min(-v, spec.x_max) : std::min(v, spec.x_max);
  };
  auto sig = [&](double v) {
    const double b = 1.5 * v - 0.3 * v * v;
    const double a = b > 0.0 ? 4.0 : 0.5;
    return spec.gain * (2.0 / (1.0 + std::exp(-a * b)) - 1.0);
  };
  TimeSignal out = x;
  switch (spec.kind) {
    case NonlinearitySpec::Kind::None:
      break;
    case NonlinearitySpec::Kind::HardClip:
      for (auto& v : out.samples) v = clip(v);
      break;
    case NonlinearitySpec::Kind::Sigmoidal:
      for (auto& v : out.samples) v = sig(v);
      break;
    case NonlinearitySpec::Kind::Cascade:
      for (auto& v : out.samples) v = sig(clip(v));
      break;
  }
  return out;
}

namespace {

// linear convolution truncated to n samples: direct for short filters
// (exact), zero-padded FFT for long ones
std::vector<double> conv_head(const std::vector<double>& x,
                              const std::vector<double>& h, std::size_t n) {
  if (x.empty() || h.empty()) return std::vector<double>(n, 0.0);
  if (h.size() <= 256) {
    std::vector<double> y(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      const std::size_t tmax = std::min(h.size() - 1, i);
      for (std::size_t t = 0; t <= tmax; ++t)
        if (i - t < x.size()) acc += h[t] * x[i - t];
      y[i] = acc;
    }
    return y;
  }
  std::size_t need = x.size() + h.size() - 1, m = 1;
  while (m < need) m <<= 1;
  std::vector<double> xp(m, 0.0), hp(m, 0.0);
  std::copy(x.begin(), x.end(), xp.begin());
  std::copy(h.begin(), h.end(), hp.begin());
  auto xf = fft(xp);
  auto hf = fft(hp);
  for (std::size_t i = 0; i < m; ++i) xf[i] *= hf[i];
  auto y = ifft(xf);
  y.resize(n, 0.0);
  return y;
}

double energy(const std::vector<double>& v) {
  double e = 0.0;
  for (double x : v) e += x * x;
  return e;
}

}  // namespace

RenderedScene render_scene(const EchoScene& scene) {
  scene.farend.validate();
  scene.nearend.validate();
  if (scene.rir_schedule.empty())
    throw ConfigError("render_scene: empty rir schedule");
  if (scene.rir_schedule.front().first != 0)
    throw ConfigError("render_scene: rir schedule must start at sample 0");
  for (std::size_t i = 0; i + 1 < scene.rir_schedule.size(); ++i)
    if (scene.rir_schedule[i].first >= scene.rir_schedule[i + 1].first)
      throw ConfigError("render_scene: rir schedule must be strictly increasing");
  for (const auto& [start, rir] : scene.rir_schedule)
    if (rir.taps.empty()) throw ConfigError("render_scene: empty rir in schedule");
  if (!std::isfinite(scene.ser_db))
    throw ConfigError("render_scene: ser_db must be finite");

  const std::size_t n = scene.farend.samples.size();
  const TimeSignal driven = apply_nonlinearity(scene.farend, scene.nonlinearity);

  // hard-switch echo: each segment convolves only its own span of the
  // far-end (delay line resets at the switch)
  std::vector<double> echo(n, 0.0);
  for (std::size_t i = 0; i < scene.rir_schedule.size(); ++i) {
    const std::size_t t0 = std::min(scene.rir_schedule[i].first, n);
    const std::size_t t1 = i + 1 < scene.rir_schedule.size()
                               ? std::min(scene.rir_schedule[i + 1].first, n)
                               : n;
    if (t0 >= t1) continue;
    std::vector<double> seg(driven.samples.begin() + (std::ptrdiff_t)t0,
                            driven.samples.begin() + (std::ptrdiff_t)t1);
    auto y = conv_head(seg, scene.rir_schedule[i].second.taps, t1 - t0);
    std::copy(y.begin(), y.end(), echo.begin() + (std::ptrdiff_t)t0);
  }

  std::vector<double> near(n, 0.0);
  const std::size_t ncopy = std::min(n, scene.nearend.samples.size());
  std::copy(scene.nearend.samples.begin(),
            scene.nearend.samples.begin() + (std::ptrdiff_t)ncopy, near.begin());

  const double e_echo = energy(echo);
  const double e_near = energy(near);
  if (e_near > 0.0) {
    if (e_echo == 0.0)
      throw ConfigError("render_scene: zero-energy far-end echo with finite SER");
    const double s = std::sqrt(std::pow(10.0, scene.ser_db / 10.0) * e_echo / e_near);
    for (auto& v : near) v *= s;
  }

  RenderedScene out;
  out.mic.sample_rate = scene.farend.sample_rate;
  out.echo.sample_rate = scene.farend.sample_rate;
  out.nearend_aligned.sample_rate = scene.farend.sample_rate;
  out.echo.samples = echo;
  out.nearend_aligned.samples = near;
  out.mic.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.mic.samples[i] = near[i] + echo[i];
  return out;
}

// ---------------------------------------------------------------------------
// Surrogate sources

TimeSignal gen_white(std::size_t n, double fs, double level, Rng& rng) {
  TimeSignal x;
  x.sample_rate = fs;
  x.samples.resize(n);
  for (auto& v : x.samples) v = level * rng.normal();
  return x;
}

namespace {

void peak_normalize(std::vector<double>& v, double level) {
  double peak = 0.0;
  for (double x : v) peak = std::max(peak, std::fabs(x));
  if (peak > 0.0)
    for (auto& x : v) x *= level / peak;
}

}  // namespace

TimeSignal gen_noise_bursts(std::size_t n, double fs, double level, Rng& rng) {
  TimeSignal x;
  x.sample_rate = fs;
  x.samples.resize(n, 0.0);

  // two one-pole lowpass passes ~2 kHz
  const double a = 1.0 - std::exp(-2.0 * M_PI * 2000.0 / fs);
  double s1 = 0.0, s2 = 0.0;
  for (auto& v : x.samples) {
    s1 += a * (rng.normal() - s1);
    s2 += a * (s1 - s2);
    v = s2;
  }

  const std::size_t ramp = (std::size_t)(0.010 * fs);
  std::size_t pos = 0;
  bool on = rng.uniform() < 0.7;
  while (pos < n) {
    const double dur_ms = on ? rng.uniform(80.0, 300.0) : rng.uniform(40.0, 200.0);
    const std::size_t dur = (std::size_t)(dur_ms * 1e-3 * fs);
    const std::size_t end = std::min(n, pos + dur);
    if (!on) {
      for (std::size_t i = pos; i < end; ++i) x.samples[i] = 0.0;
    } else {
      for (std::size_t i = pos; i < end; ++i) {
        const std::size_t into = i - pos, left = end - i - 1;
        double env = 1.0;
        if (into < ramp) env = 0.5 * (1.0 - std::cos(M_PI * (double)into / (double)ramp));
        else if (left < ramp) env = 0.5 * (1.0 - std::cos(M_PI * (double)left / (double)ramp));
        x.samples[i] *= env;
      }
    }
    pos = end;
    on = !on;
  }
  peak_normalize(x.samples, level);
  return x;
}

TimeSignal gen_ar2_speech(std::size_t n, double fs, double level, Rng& rng) {
  TimeSignal x;
  x.sample_rate = fs;
  x.samples.resize(n, 0.0);

  std::size_t pos = 0;
  bool voiced = true;
  double y1 = 0.0, y2 = 0.0;
  while (pos < n) {
    const double dur_ms =
        voiced ? rng.uniform(100.0, 400.0) : rng.uniform(50.0, 150.0);
    const std::size_t dur = (std::size_t)(dur_ms * 1e-3 * fs);
    const std::size_t end = std::min(n, pos + dur);
    if (voiced) {
      const double f0 = rng.uniform(300.0, 2500.0);
      const double bw = rng.uniform(100.0, 400.0);
      const double r = std::exp(-M_PI * bw / fs);
      const double a1 = 2.0 * r * std::cos(2.0 * M_PI * f0 / fs);
      const double a2 = -r * r;
      for (std::size_t i = pos; i < end; ++i) {
        const double y = rng.normal() + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        // short fade at segment edges to avoid clicks
        const std::size_t ramp = (std::size_t)(0.005 * fs);
        const std::size_t into = i - pos, left = end - i - 1;
        double env = 1.0;
        if (into < ramp) env = (double)into / (double)ramp;
        else if (left < ramp) env = (double)left / (double)ramp;
        x.samples[i] = y * env;
      }
    } else {
      y1 = y2 = 0.0;
    }
    pos = end;
    voiced = !voiced;
  }
  peak_normalize(x.samples, level);
  return x;
}

Rir random_fir(std::size_t taps, double decay, double fs, Rng& rng) {
  if (taps == 0) throw ConfigError("random_fir: need at least one tap");
  Rir rir;
  rir.fs = fs;
  rir.taps.resize(taps);
  for (std::size_t i = 0; i < taps; ++i) {
    const double env =
        taps > 1 ? std::exp(-decay * (double)i / (double)(taps - 1)) : 1.0;
    rir.taps[i] = env * rng.normal();
  }
  double e = energy(rir.taps);
  if (e == 0.0) {
    rir.taps[0] = 1.0;
    e = 1.0;
  }
  const double s = 1.0 / std::sqrt(e);
  for (auto& t : rir.taps) t *= s;
  return rir;
}

}  // namespace nk
