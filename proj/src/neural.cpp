#include "nk/neural.hpp"

#include <algorithm>
#include <cmath>

namespace nk {

namespace {

const Var& named(const WeightsView& w, const std::string& name) {
  auto it = w.find(name);
  if (it == w.end()) throw ConfigError("missing model tensor " + name);
  return it->second;
}

constexpr double kEps = 1e-12;

}  // namespace

Var linear_forward(const WeightsView& w, const std::string& base,
                   const Var& x) {
  return add(matmul(named(w, base + ".w"), x), named(w, base + ".b"));
}

LstmState lstm_cell(const Var& wx, const Var& wh, const Var& b, const Var& x,
                    const LstmState& prev) {
  const std::size_t h = b.v().numel() / 4;
  Var z = add(add(matmul(wx, x), matmul(wh, prev.h)), b);
  Var i = sigmoid(slice(z, 0, h));
  Var f = sigmoid(slice(z, h, h));
  Var g = vtanh(slice(z, 2 * h, h));
  Var o = sigmoid(slice(z, 3 * h, h));
  Var c = add(mul(f, prev.c), mul(i, g));
  return {mul(o, vtanh(c)), c};
}

Var conv1d_forward(const Var& x, const Var& w, const Var& b) {
  return bias_rows(conv1d(x, w), b);
}

namespace {

Var wrap_on(Tape* tape, Tensor t) {
  return tape ? tape->constant(std::move(t)) : Var::detached(std::move(t));
}

std::pair<Var, Var> rows_of(const Var& spec) {
  const std::size_t f = spec.v().shape[1];
  return {slice(spec, 0, f), slice(spec, f, f)};
}

// a conj(b) / (|a||b| + eps), per bin
Var norm_corr(const Var& a, const Var& b) {
  Var num = cmul(a, conj(b));
  Var den = add_const(mul(cabs(a), cabs(b)), kEps);
  return crdiv(num, den);
}

// normalized log power with first-frame-seeded running statistics
Var nlp(const Var& spec, Var& mean, Var& m2, bool seen) {
  Var lp = vlog(add_const(cabs2(spec), kEps));
  if (!seen) {
    mean = lp;
    m2 = mul(lp, lp);
  } else {
    mean = add(scale(mean, 0.999), scale(lp, 0.001));
    m2 = add(scale(m2, 0.999), scale(mul(lp, lp), 0.001));
  }
  Var var = relu(sub(m2, mul(mean, mean)));
  return divide(sub(lp, mean), vsqrt(add_const(var, 1e-6)));
}

}  // namespace

Var extract_features(const Var& y_os, const Var& x_os, FeatureState& state,
                     const WeightsView& w, Tape* tape) {
  const std::size_t f = y_os.v().shape[1];
  if (!state.y_prev.defined()) {
    state.y_prev = wrap_on(tape, Tensor({2, f}));
    state.x_prev = wrap_on(tape, Tensor({2, f}));
  }

  Var nlp_y = nlp(y_os, state.mean_y, state.m2_y, state.seen);
  Var nlp_x = nlp(x_os, state.mean_x, state.m2_x, state.seen);
  Var ct_y = norm_corr(y_os, state.y_prev);
  Var ct_x = norm_corr(x_os, state.x_prev);

  // previous frequency bin of Y, zero at the DC edge
  auto [yr, yi] = rows_of(y_os);
  Var z1 = wrap_on(tape, Tensor({1}));
  Var y_shift = reshape(concat(concat(z1, slice(yr, 0, f - 1)),
                               concat(z1, slice(yi, 0, f - 1))),
                        {2, f});
  Var cf_y = norm_corr(y_os, y_shift);
  Var cc = norm_corr(y_os, x_os);

  auto [ctyr, ctyi] = rows_of(ct_y);
  auto [ctxr, ctxi] = rows_of(ct_x);
  auto [cfyr, cfyi] = rows_of(cf_y);
  auto [ccr, cci] = rows_of(cc);
  Var feat = concat_many(
      {nlp_y, nlp_x, ctyr, ctyi, ctxr, ctxi, cfyr, cfyi, ccr, cci});

  state.y_prev = y_os;
  state.x_prev = x_os;
  state.seen = true;
  return linear_forward(w, "feat.proj", feat);
}

void EngineConfig::validate() const {
  fdkf.validate();
  model.validate();
  if (model.n_bins != fdkf.block.bins())
    throw ConfigError("engine: model n_bins " + std::to_string(model.n_bins) +
                      " does not match fft bins " +
                      std::to_string(fdkf.block.bins()));
}

NeuralKalmanEngine::NeuralKalmanEngine(const EngineConfig& cfg,
                                       WeightsView weights, Tape* tape)
    : cfg_(cfg), tape_(tape), w_(std::move(weights)), filt_(cfg.fdkf, tape) {
  cfg_.validate();
  if (cfg_.variant != Variant::Fdkf) {
    auto shapes = cfg_.model.expected_shapes();
    for (const auto& [name, shape] : shapes) {
      auto it = w_.find(name);
      if (it == w_.end()) throw ConfigError("missing model tensor " + name);
      if (it->second.v().shape != shape)
        throw ConfigError("model tensor " + name + " has the wrong shape");
    }
  }
  reset();
}

void NeuralKalmanEngine::reset() {
  filt_.reset();
  xbuf_.assign(cfg_.fdkf.block.fft_size, 0.0);
  feat_ = FeatureState{};
  shared_.assign(cfg_.model.lstm_layers, LstmState{});
  t_state_ = vv_state_ = dd_state_ = LstmState{};
  ref_win_.clear();
  frame_ = 0;
}

Var NeuralKalmanEngine::wrap(Tensor t) const {
  return tape_ ? tape_->constant(std::move(t)) : Var::detached(std::move(t));
}

Var NeuralKalmanEngine::zeros(std::size_t n) const {
  return wrap(Tensor({n}));
}

Var NeuralKalmanEngine::complex_rows(const Var& re, const Var& im) const {
  const std::size_t f = re.v().numel();
  return reshape(concat(re, im), {2, f});
}

// spec[f] -> spec[f + offset], zero-filled at the edges
Var NeuralKalmanEngine::shift_bins(const Var& spec, std::ptrdiff_t o) const {
  if (o == 0) return spec;
  const std::size_t f = spec.v().shape[1];
  auto [re, im] = rows_of(spec);
  auto shift = [&](const Var& row) {
    if (o > 0)
      return concat(slice(row, (std::size_t)o, f - (std::size_t)o),
                    zeros((std::size_t)o));
    return concat(zeros((std::size_t)-o), slice(row, 0, f - (std::size_t)-o));
  };
  return reshape(concat(shift(re), shift(im)), {2, f});
}

Var NeuralKalmanEngine::crf_farend(const Var& h_top) {
  const std::size_t f = cfg_.model.n_bins;
  const std::size_t tc = cfg_.model.crf_time_taps;
  const std::size_t fc = cfg_.model.crf_freq_taps;
  const std::size_t c = cfg_.model.crf_channels();

  Var stack = relu(linear_forward(w_, "head.g.proj", h_top));
  stack = reshape(stack, {c, f});
  stack = relu(conv1d_forward(stack, named(w_, "head.g.conv1.w"),
                              named(w_, "head.g.conv1.b")));
  Var coeff = conv1d_forward(stack, named(w_, "head.g.conv2.w"),
                             named(w_, "head.g.conv2.b"));

  Var acc;
  for (std::size_t tau = 0; tau < tc; ++tau) {
    for (std::size_t phi = 0; phi < fc; ++phi) {
      const std::size_t ch = 2 * (tau * fc + phi);
      Var cre = slice(coeff, ch * f, f);
      Var cim = slice(coeff, (ch + 1) * f, f);
      Var ref = shift_bins(ref_win_[tau],
                           (std::ptrdiff_t)phi - (std::ptrdiff_t)(fc - 1) / 2);
      Var term = cmul(complex_rows(cre, cim), ref);
      acc = acc.defined() ? add(acc, term) : term;
    }
  }
  return mirror_spectrum(acc);
}

Var NeuralKalmanEngine::psi_head(const char* base, LstmState& state,
                                 const Var& spec_full) {
  const std::string b(base);
  Var os = onesided_spectrum(spec_full);
  Var flat = reshape(os, {os.v().numel()});
  Var in = linear_forward(w_, b + ".in", flat);
  state = lstm_cell(named(w_, b + ".lstm.wx"), named(w_, b + ".lstm.wh"),
                    named(w_, b + ".lstm.b"), in, state);
  Var out = softplus(linear_forward(w_, b + ".out", state.h));
  return mirror_real(out);
}

Var NeuralKalmanEngine::step(std::span<const double> farend,
                             std::span<const double> mic, StepTrace* trace) {
  const std::size_t m = cfg_.fdkf.block.fft_size;
  const std::size_t r = cfg_.fdkf.block.hop;
  const std::size_t hdim = cfg_.model.lstm_hidden;
  if (farend.size() != r || mic.size() != r)
    throw ConfigError("engine step: blocks must hold exactly R samples");

  std::copy(xbuf_.begin() + (std::ptrdiff_t)r, xbuf_.end(), xbuf_.begin());
  std::copy(farend.begin(), farend.end(), xbuf_.end() - (std::ptrdiff_t)r);
  Tensor xt({2, m});
  std::copy(xbuf_.begin(), xbuf_.end(), xt.data.begin());
  Var x_full = fft_c(wrap(std::move(xt)));

  Tensor yt({2, m});
  std::copy(mic.begin(), mic.end(), yt.data.begin() + (std::ptrdiff_t)r);
  Var y_full = fft_c(wrap(std::move(yt)));

  FdkfOverrides ov;
  Var x_used = x_full;

  if (cfg_.variant != Variant::Fdkf) {
    Var y_os = onesided_spectrum(y_full);
    Var x_os = onesided_spectrum(x_full);

    Var h = extract_features(y_os, x_os, feat_, w_, tape_);
    for (std::size_t l = 0; l < shared_.size(); ++l) {
      const std::string base = "shared.l" + std::to_string(l) + ".";
      if (!shared_[l].h.defined())
        shared_[l] = {zeros(hdim), zeros(hdim)};
      shared_[l] = lstm_cell(named(w_, base + "wx"), named(w_, base + "wh"),
                             named(w_, base + "b"), h, shared_[l]);
      h = shared_[l].h;
    }

    if (variant_uses_a(cfg_.variant))
      ov.a = sigmoid(linear_forward(w_, "head.a", h));

    if (variant_uses_g(cfg_.variant)) {
      if (ref_win_.empty())
        ref_win_.assign(cfg_.model.crf_time_taps,
                        wrap(Tensor({2, cfg_.model.n_bins})));
      ref_win_.pop_back();
      ref_win_.insert(ref_win_.begin(), cfg_.crf_on_mic ? y_os : x_os);
      x_used = crf_farend(h);
    }

    if (variant_uses_t(cfg_.variant)) {
      const std::size_t tdim = cfg_.model.t_lstm_hidden;
      if (!t_state_.h.defined()) t_state_ = {zeros(tdim), zeros(tdim)};
      ov.transition = [this](const Var& w_new) {
        Var os = onesided_spectrum(w_new);
        Var in = linear_forward(
            w_, "head.t.in",
            scale(reshape(os, {os.v().numel()}), kTransitionPreScale));
        t_state_ = lstm_cell(named(w_, "head.t.lstm.wx"),
                             named(w_, "head.t.lstm.wh"),
                             named(w_, "head.t.lstm.b"), in, t_state_);
        return mirror_spectrum(complex_rows(
            scale(linear_forward(w_, "head.t.re", t_state_.h),
                  kTransitionPostScale),
            scale(linear_forward(w_, "head.t.im", t_state_.h),
                  kTransitionPostScale)));
      };
    }
  }

  Var s_hat = filt_.predict(x_used, y_full);

  if (variant_uses_psi(cfg_.variant)) {
    const std::size_t tdim = cfg_.model.t_lstm_hidden;
    if (!vv_state_.h.defined()) {
      vv_state_ = {zeros(tdim), zeros(tdim)};
      dd_state_ = {zeros(tdim), zeros(tdim)};
    }
    ov.psi_vv = psi_head("head.psi_vv", vv_state_, s_hat);
    ov.psi_dd = psi_head("head.psi_dd", dd_state_, filt_.w());
  }

  Var psi_vv_used = ov.psi_vv ? *ov.psi_vv : filt_.psi_vv();
  Var k_gain = filt_.gain(x_used, psi_vv_used);
  filt_.update(k_gain, s_hat, x_used, ov);

  Var out = slice(ifft_c(s_hat), r, r);
  if (!out.v().all_finite())
    throw DivergedError("engine step: non-finite output at frame " +
                        std::to_string(frame_));

  if (trace) {
    trace->a_hat = ov.a ? ov.a->v().data[0] : cfg_.fdkf.a_default;
    double kn = 0.0, me = 0.0, oe = 0.0;
    for (double v : k_gain.v().data) kn += v * v;
    for (double v : mic) me += v * v;
    for (double v : out.v().data) oe += v * v;
    trace->k_norm = std::sqrt(kn);
    trace->mic_energy = me;
    trace->out_energy = oe;
  }
  ++frame_;
  return out;
}

}  // namespace nk
