#include "nk/fdkf.hpp"

#include <algorithm>
#include <cmath>

namespace nk {

void FdkfConfig::validate() const {
  block.validate();
  if (!(a_default >= 0.0 && a_default <= 1.0))
    throw ConfigError("FdkfConfig: transition factor must lie in [0,1]");
  if (!(psi_vv_smoothing > 0.0 && psi_vv_smoothing < 1.0))
    throw ConfigError("FdkfConfig: psi_vv smoothing must lie in (0,1)");
  if (!(psi_dd_smoothing >= 0.0 && psi_dd_smoothing < 1.0))
    throw ConfigError("FdkfConfig: psi_dd smoothing must lie in [0,1)");
  if (!(p_init > 0.0)) throw ConfigError("FdkfConfig: p_init must be positive");
  if (!(delta > 0.0)) throw ConfigError("FdkfConfig: delta must be positive");
}

FdkfFilter::FdkfFilter(const FdkfConfig& cfg, Tape* tape)
    : cfg_(cfg), tape_(tape) {
  cfg_.validate();
  reset();
}

void FdkfFilter::reset() {
  const std::size_t m = cfg_.block.fft_size;
  x_buf_.assign(m, 0.0);
  w_ = Var::detached(Tensor({2, m}));
  p_ = Var::detached(Tensor::full({m}, cfg_.p_init));
  psi_vv_ = Var::detached(Tensor({m}));
  psi_dd_cov_ = Var::detached(Tensor({m}));
  k_ = 0;
}

void FdkfFilter::set_weights(Tensor w) {
  if (w.shape != std::vector<std::size_t>{2, cfg_.block.fft_size})
    throw ConfigError("set_weights expects a [2, fft_size] tensor, got " + w.shape_str());
  if (!w.all_finite()) throw ConfigError("set_weights: non-finite weights");
  w_ = wrap(std::move(w));
}

Var FdkfFilter::wrap(Tensor t) const {
  return tape_ ? tape_->constant(std::move(t)) : Var::detached(std::move(t));
}

Var FdkfFilter::predict(const Var& x, const Var& y) const {
  const std::size_t m = cfg_.block.fft_size;
  if (x.v().shape != std::vector<std::size_t>{2, m} ||
      y.v().shape != std::vector<std::size_t>{2, m})
    throw ConfigError("fdkf predict: spectrum length does not match config");
  return sub(y, proj_keep_last(cmul(x, w_), cfg_.block.hop));
}

Var FdkfFilter::gain(const Var& x, const Var& psi_vv) const {
  // per bin: K = P * conj(X) / (|X|^2 * P + 2 psi_vv + delta)
  Var den = add_const(add(mul(cabs2(x), p_), scale(psi_vv, 2.0)), cfg_.delta);
  return crdiv(crmul(conj(x), p_), den);
}

void FdkfFilter::update(const Var& k_gain, const Var& s_hat, const Var& x,
                        const FdkfOverrides& ov) {
  const std::size_t m = cfg_.block.fft_size;
  const std::size_t r = cfg_.block.hop;
  const bool keep_first =
      cfg_.update_projection == FdkfConfig::UpdateProjection::KeepFirst;

  Var a = ov.a ? *ov.a : wrap(Tensor::scalar(cfg_.a_default));
  Var a2 = mul(a, a);

  // weight update: W+ = A (W + G(K o S)), optionally passed through t(.)
  Var dw = cmul(k_gain, s_hat);
  dw = keep_first ? proj_keep_first(dw, r) : proj_keep_last(dw, r);
  Var w_new = crmul(add(w_, dw), a);
  if (ov.transition) {
    w_new = ov.transition(w_new);
    if (w_new.v().shape != std::vector<std::size_t>{2, m})
      throw ConfigError("fdkf update: transition hook changed the shape");
    w_new = keep_first ? proj_keep_first(w_new, r) : proj_keep_last(w_new, r);
  }

  // covariance update: P+ = A^2 (1 - 1/2 Re(K o X)) P + psi_dd, clamped
  Var re_kx = slice(cmul(k_gain, x), 0, m);
  Var shrink = add_const(scale(re_kx, -0.5), 1.0);
  Var psi_dd;
  Var psi_dd_cov_new = psi_dd_cov_;
  if (ov.psi_dd) {
    psi_dd = *ov.psi_dd;
  } else {
    Var w_sq = cabs2(w_);  // pre-update weights
    if (cfg_.psi_dd_smoothing > 0.0) {
      psi_dd_cov_new = add(scale(psi_dd_cov_, cfg_.psi_dd_smoothing),
                           scale(w_sq, 1.0 - cfg_.psi_dd_smoothing));
      w_sq = psi_dd_cov_new;
    }
    psi_dd = mul(add_const(neg(a2), 1.0), w_sq);
  }
  Var p_new = relu(add(mul(mul(shrink, p_), a2), psi_dd));

  // observation-noise update: EMA of |S_hat|^2, or the hook's estimate
  Var psi_vv_new =
      ov.psi_vv ? *ov.psi_vv
                : add(scale(psi_vv_, cfg_.psi_vv_smoothing),
                      scale(cabs2(s_hat), 1.0 - cfg_.psi_vv_smoothing));

  if (!w_new.v().all_finite() || !p_new.v().all_finite() ||
      !psi_vv_new.v().all_finite())
    throw DivergedError("fdkf update: non-finite filter state at frame " +
                        std::to_string(k_));

  w_ = w_new;
  p_ = p_new;
  psi_vv_ = psi_vv_new;
  psi_dd_cov_ = psi_dd_cov_new;
}

Var FdkfFilter::step(std::span<const double> farend,
                     std::span<const double> mic, const FdkfOverrides& ov,
                     FdkfDiag* diag) {
  const std::size_t m = cfg_.block.fft_size;
  const std::size_t r = cfg_.block.hop;
  if (farend.size() != r || mic.size() != r)
    throw ConfigError("fdkf step: blocks must hold exactly R samples");

  // slide the far-end buffer so it holds the most recent M samples
  std::copy(x_buf_.begin() + (std::ptrdiff_t)r, x_buf_.end(), x_buf_.begin());
  std::copy(farend.begin(), farend.end(), x_buf_.end() - (std::ptrdiff_t)r);

  Tensor xt({2, m});
  std::copy(x_buf_.begin(), x_buf_.end(), xt.data.begin());
  Var x = fft_c(wrap(std::move(xt)));
  if (ov.x_hat) {
    if (ov.x_hat->v().shape != std::vector<std::size_t>{2, m})
      throw ConfigError("fdkf step: far-end hook output has the wrong shape");
    x = *ov.x_hat;
  }

  Tensor yt({2, m});  // first half zero: overlap-save measurement frame
  std::copy(mic.begin(), mic.end(), yt.data.begin() + (std::ptrdiff_t)r);
  Var y = fft_c(wrap(std::move(yt)));

  Var psi_vv_used = ov.psi_vv ? *ov.psi_vv : psi_vv_;
  Var s_hat = predict(x, y);
  Var k_gain = gain(x, psi_vv_used);
  update(k_gain, s_hat, x, ov);

  Var out = slice(ifft_c(s_hat), r, r);  // last R time samples
  if (!out.v().all_finite())
    throw DivergedError("fdkf step: non-finite output at frame " +
                        std::to_string(k_));

  if (diag) {
    diag->a_used = ov.a ? ov.a->v().data[0] : cfg_.a_default;
    double kn = 0.0;
    for (double v : k_gain.v().data) kn += v * v;
    diag->k_norm = std::sqrt(kn);
    double me = 0.0, oe = 0.0;
    for (double v : mic) me += v * v;
    for (double v : out.v().data) oe += v * v;
    diag->mic_energy = me;
    diag->out_energy = oe;
  }
  ++k_;
  return out;
}

std::vector<double> FdkfFilter::echo_path_estimate() const {
  auto taps = ifft(complex_vec(w_.v()));
  taps.resize(cfg_.block.hop);
  return taps;
}

// ---------------------------------------------------------------------------

void NlmsConfig::validate() const {
  block.validate();
  if (!(mu >= 0.0 && mu < 2.0))
    throw ConfigError("NlmsConfig: step size must lie in [0,2)");
  if (!(delta > 0.0)) throw ConfigError("NlmsConfig: delta must be positive");
  if (!(power_smoothing > 0.0 && power_smoothing < 1.0))
    throw ConfigError("NlmsConfig: power smoothing must lie in (0,1)");
}

NlmsFilter::NlmsFilter(const NlmsConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t m = cfg_.block.fft_size;
  x_buf_.assign(m, 0.0);
  w_.assign(m, {0.0, 0.0});
  power_.assign(m, 0.0);
}

std::vector<double> NlmsFilter::step(std::span<const double> farend,
                                     std::span<const double> mic) {
  const std::size_t m = cfg_.block.fft_size;
  const std::size_t r = cfg_.block.hop;
  if (farend.size() != r || mic.size() != r)
    throw ConfigError("nlms step: blocks must hold exactly R samples");

  std::copy(x_buf_.begin() + (std::ptrdiff_t)r, x_buf_.end(), x_buf_.begin());
  std::copy(farend.begin(), farend.end(), x_buf_.end() - (std::ptrdiff_t)r);

  cvec xs = fft(x_buf_);
  std::vector<double> padded(m, 0.0);
  std::copy(mic.begin(), mic.end(), padded.begin() + (std::ptrdiff_t)r);
  cvec ys = fft(padded);

  cvec echo(m);
  for (std::size_t f = 0; f < m; ++f) echo[f] = xs[f] * w_[f];
  echo = project_keep_last(echo, cfg_.block);
  cvec err(m);
  for (std::size_t f = 0; f < m; ++f) err[f] = ys[f] - echo[f];

  cvec grad(m);
  for (std::size_t f = 0; f < m; ++f) {
    power_[f] = cfg_.power_smoothing * power_[f] +
                (1.0 - cfg_.power_smoothing) * std::norm(xs[f]);
    grad[f] = std::conj(xs[f]) * err[f] / (power_[f] + cfg_.delta);
  }
  grad = project_keep_first(grad, cfg_.block);
  for (std::size_t f = 0; f < m; ++f) w_[f] += cfg_.mu * grad[f];

  auto out_full = ifft(err);
  return std::vector<double>(out_full.begin() + (std::ptrdiff_t)r,
                             out_full.end());
}

std::vector<double> NlmsFilter::echo_path_estimate() const {
  auto taps = ifft(w_);
  taps.resize(cfg_.block.hop);
  return taps;
}

}  // namespace nk
