#include "nk/loss.hpp"

#include <cmath>
#include <vector>

#include "nk/common.hpp"

namespace nk {

void LossConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("LossConfig: alpha must be >= 0");
  if (!(si_sdr_cap > 0.0))
    throw ConfigError("LossConfig: si_sdr_cap must be positive");
}

namespace {

constexpr double kEps = 1e-12;

// clamp(v, -cap, cap) with gradient 1 inside the band and 0 outside
Var clamp_sym(const Var& v, double cap) {
  Var upper = add_const(neg(relu(add_const(neg(v), cap))), cap);
  return add_const(relu(add_const(upper, cap)), -cap);
}

}  // namespace

Var si_sdr_loss(const Var& est, std::span<const double> reference,
                double cap) {
  const std::size_t n = reference.size();
  if (est.v().numel() != n) throw ConfigError("si_sdr: length mismatch");
  if (n == 0) throw ConfigError("si_sdr: empty signals");

  double mr = 0.0;
  for (double v : reference) mr += v;
  mr /= (double)n;
  Tensor rc({n});
  double rr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    rc.data[i] = reference[i] - mr;
    rr += rc.data[i] * rc.data[i];
  }
  if (rr == 0.0) throw ConfigError("si_sdr: reference carries no energy");
  Var rcv = Var::detached(std::move(rc));

  Var ec = sub(est, mean(est));
  Var alpha = scale(sum(mul(ec, rcv)), 1.0 / (rr + kEps));
  Var t = mul(alpha, rcv);
  Var d = sub(ec, t);
  Var num = add_const(sum(mul(t, t)), kEps);
  Var den = add_const(sum(mul(d, d)), kEps);
  Var v = scale(vlog(divide(num, den)), 10.0 / std::log(10.0));
  return clamp_sym(v, cap);
}

Var training_loss(const Var& est, std::span<const double> target,
                  const BlockConfig& blk, const LossConfig& cfg,
                  LossParts* parts) {
  cfg.validate();
  blk.validate();
  const std::size_t r = blk.hop, m = blk.fft_size;
  const std::size_t n = target.size();
  if (est.v().numel() != n)
    throw ConfigError("training loss: estimate and target lengths differ");
  if (n == 0 || n % r != 0)
    throw ConfigError("training loss: signals must hold whole blocks");
  const std::size_t frames = n / r;

  Var si = si_sdr_loss(est, target, cfg.si_sdr_cap);

  // zero-padded measurement frames: magnitudes of [0_R ; block]
  Var mae_acc;
  std::vector<double> padded(m, 0.0);
  for (std::size_t k = 0; k < frames; ++k) {
    cvec spec = [&] {
      for (std::size_t i = 0; i < r; ++i) padded[r + i] = target[k * r + i];
      return fft(padded);
    }();
    Tensor ref_mag({blk.bins()});
    for (std::size_t f = 0; f < blk.bins(); ++f)
      ref_mag.data[f] = std::abs(spec[f]);

    Var block = slice(est, k * r, r);
    Var row = concat(Var::detached(Tensor({r})), block);
    Var full = reshape(concat(row, Var::detached(Tensor({m}))), {2, m});
    Var mag = cabs(onesided_spectrum(fft_c(full)));
    Var term = mean(vabs(sub(mag, Var::detached(std::move(ref_mag)))));
    mae_acc = mae_acc.defined() ? add(mae_acc, term) : term;
  }
  Var mae = scale(mae_acc, 1.0 / (double)frames);

  Var total = add(neg(si), scale(mae, cfg.alpha));
  if (parts) {
    parts->total = total.v().data[0];
    parts->si_sdr = si.v().data[0];
    parts->mag_mae = mae.v().data[0];
  }
  return total;
}

}  // namespace nk
