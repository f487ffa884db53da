#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <map>
#include <vector>

#include "nk/loss.hpp"
#include "nk/metrics.hpp"
#include "nk/rng.hpp"
#include "nk/signal.hpp"

using namespace nk;

namespace {

const BlockConfig kDesk{32, 64};

std::vector<double> random_signal(Rng& rng, std::size_t n, double amp = 1.0) {
  std::vector<double> s(n);
  for (auto& v : s) v = amp * (2.0 * rng.uniform() - 1.0);
  return s;
}

Var detached_vec(const std::vector<double>& v) {
  return Var::detached(Tensor({v.size()}, v));
}

}  // namespace

TEST_CASE("differentiable si-sdr agrees with the plain metric") {
  Rng rng(11);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t n = 64 + 32 * (std::size_t)trial;
    std::vector<double> ref = random_signal(rng, n);
    std::vector<double> est(n);
    const double mix = 0.2 + 0.1 * trial;
    for (std::size_t i = 0; i < n; ++i)
      est[i] = ref[i] + mix * (2.0 * rng.uniform() - 1.0);

    const double plain = si_sdr_db(est, ref, 30.0);
    const Var v = si_sdr_loss(detached_vec(est), ref, 30.0);
    CHECK(v.v().data[0] == doctest::Approx(plain).epsilon(1e-12));
  }
}

TEST_CASE("si-sdr clamps symmetrically at the cap") {
  Rng rng(13);
  std::vector<double> ref = random_signal(rng, 96);

  // a perfect estimate rails at +cap
  Var hi = si_sdr_loss(detached_vec(ref), ref, 30.0);
  CHECK(hi.v().data[0] == 30.0);

  // orthogonal garbage rails at -cap: est is a shifted copy of noise
  std::vector<double> junk(96, 0.0);
  junk[0] = 1.0;  // nearly orthogonal to a random reference
  Var lo = si_sdr_loss(detached_vec(junk), ref, 25.0);
  CHECK(lo.v().data[0] >= -25.0);
  CHECK(lo.v().data[0] ==
        doctest::Approx(si_sdr_db(junk, ref, 25.0)).epsilon(1e-12));

  CHECK_THROWS_AS(si_sdr_loss(detached_vec(junk), std::vector<double>(12, 0.5),
                              30.0),
                  ConfigError);
  CHECK_THROWS_AS(
      si_sdr_loss(detached_vec(junk), std::vector<double>(96, 0.25), 30.0),
      ConfigError);  // constant reference has no centred energy
}

TEST_CASE("gradients of the si-sdr term check out against differences") {
  Rng rng(17);
  const std::size_t n = 48;
  std::vector<double> ref = random_signal(rng, n);
  std::vector<double> est(n);
  for (std::size_t i = 0; i < n; ++i)
    est[i] = 0.8 * ref[i] + 0.3 * (2.0 * rng.uniform() - 1.0);

  std::map<std::string, Tensor> params;
  params["est"] = Tensor({n}, est);
  auto fn = [&](const std::map<std::string, Var>& p, Tape*) {
    return si_sdr_loss(p.at("est"), ref, 30.0);
  };
  auto rep = grad_check(fn, params, 1e-6);
  CAPTURE(rep.worst_param);
  CAPTURE(rep.worst_rel_err);
  CHECK(rep.pass);
}

TEST_CASE("a perfect estimate reaches the loss floor") {
  Rng rng(19);
  std::vector<double> target = random_signal(rng, 4 * kDesk.hop);
  LossConfig cfg;
  LossParts parts;
  Var total =
      training_loss(detached_vec(target), target, kDesk, cfg, &parts);
  CHECK(parts.si_sdr == 30.0);
  CHECK(parts.mag_mae == 0.0);
  CHECK(total.v().data[0] == -30.0);
}

TEST_CASE("the magnitude term scales with its configured weight") {
  Rng rng(23);
  std::vector<double> target = random_signal(rng, 6 * kDesk.hop);
  std::vector<double> est(target.size(), 0.0);
  for (std::size_t i = 0; i < est.size(); ++i)
    est[i] = 0.5 * target[i] + 0.4 * (2.0 * rng.uniform() - 1.0);

  LossConfig heavy;  // alpha = 10000
  LossConfig light;
  light.alpha = 0.0;
  LossParts hp, lp;
  Var ht = training_loss(detached_vec(est), target, kDesk, heavy, &hp);
  Var lt = training_loss(detached_vec(est), target, kDesk, light, &lp);

  CHECK(hp.mag_mae == lp.mag_mae);
  CHECK(hp.mag_mae > 0.0);
  CHECK(hp.si_sdr == lp.si_sdr);
  CHECK(ht.v().data[0] ==
        doctest::Approx(lt.v().data[0] + 10000.0 * hp.mag_mae).epsilon(1e-12));
  CHECK(hp.total == ht.v().data[0]);
  CHECK(lp.total == lt.v().data[0]);
}

TEST_CASE("loss parts recompute from scratch in plain arithmetic") {
  Rng rng(29);
  const std::size_t frames = 5, r = kDesk.hop, m = kDesk.fft_size;
  std::vector<double> target = random_signal(rng, frames * r);
  std::vector<double> est(target.size());
  for (std::size_t i = 0; i < est.size(); ++i)
    est[i] = 0.7 * target[i] + 0.2 * (2.0 * rng.uniform() - 1.0);

  LossConfig cfg;
  cfg.alpha = 125.0;
  LossParts parts;
  training_loss(detached_vec(est), target, kDesk, cfg, &parts);

  // independent recomputation over plain doubles
  const double si = si_sdr_db(est, target, cfg.si_sdr_cap);
  double mae = 0.0;
  for (std::size_t k = 0; k < frames; ++k) {
    std::vector<double> pt(m, 0.0), pe(m, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
      pt[r + i] = target[k * r + i];
      pe[r + i] = est[k * r + i];
    }
    const cvec st = fft(pt), se = fft(pe);
    double acc = 0.0;
    for (std::size_t f = 0; f < kDesk.bins(); ++f)
      acc += std::fabs(std::abs(se[f]) - std::abs(st[f]));
    mae += acc / (double)kDesk.bins();
  }
  mae /= (double)frames;

  CHECK(parts.si_sdr == doctest::Approx(si).epsilon(1e-12));
  CHECK(parts.mag_mae == doctest::Approx(mae).epsilon(1e-12));
  CHECK(parts.total ==
        doctest::Approx(-si + cfg.alpha * mae).epsilon(1e-12));
}

TEST_CASE("gradients of the full objective check out against differences") {
  Rng rng(31);
  const std::size_t n = 2 * kDesk.hop;
  std::vector<double> target = random_signal(rng, n);
  std::vector<double> est(n);
  for (std::size_t i = 0; i < n; ++i)
    est[i] = 0.6 * target[i] + 0.3 * (2.0 * rng.uniform() - 1.0);

  LossConfig cfg;
  cfg.alpha = 10.0;  // keep both terms comparable for the probe
  std::map<std::string, Tensor> params;
  params["est"] = Tensor({n}, est);
  auto fn = [&](const std::map<std::string, Var>& p, Tape*) {
    return training_loss(p.at("est"), target, kDesk, cfg, nullptr);
  };
  auto rep = grad_check(fn, params, 1e-5);
  CAPTURE(rep.worst_param);
  CAPTURE(rep.worst_rel_err);
  CHECK(rep.pass);
}

TEST_CASE("loss validation rejects malformed inputs") {
  std::vector<double> target(64, 0.1);
  target[0] = 0.9;  // give it centred energy
  LossConfig cfg;

  CHECK_THROWS_AS(
      training_loss(Var::detached(Tensor({32})), target, kDesk, cfg),
      ConfigError);
  CHECK_THROWS_AS(training_loss(detached_vec(std::vector<double>(48, 0.1)),
                                std::vector<double>(48, 0.1), kDesk, cfg),
                  ConfigError);  // not a whole number of blocks
  CHECK_THROWS_AS(training_loss(detached_vec(std::vector<double>(64, 0.0)),
                                std::vector<double>(64, 0.0), kDesk, cfg),
                  ConfigError);  // silent target

  LossConfig bad;
  bad.alpha = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = LossConfig{};
  bad.si_sdr_cap = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
