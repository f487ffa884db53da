#include "nk/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace nk {

double si_sdr_db(std::span<const double> estimate,
                 std::span<const double> reference, double cap) {
  if (estimate.size() != reference.size())
    throw ConfigError("si_sdr: length mismatch");
  if (estimate.empty()) throw ConfigError("si_sdr: empty signals");
  const double n = (double)estimate.size();
  double me = 0.0, mr = 0.0;
  for (double v : estimate) me += v;
  for (double v : reference) mr += v;
  me /= n;
  mr /= n;

  const double eps = 1e-12;
  double dot = 0.0, rr = 0.0;
  for (std::size_t i = 0; i < estimate.size(); ++i) {
    dot += (estimate[i] - me) * (reference[i] - mr);
    rr += (reference[i] - mr) * (reference[i] - mr);
  }
  const double alpha = dot / (rr + eps);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < estimate.size(); ++i) {
    const double t = alpha * (reference[i] - mr);
    const double d = (estimate[i] - me) - t;
    num += t * t;
    den += d * d;
  }
  const double v = 10.0 * std::log10((num + eps) / (den + eps));
  return std::clamp(v, -cap, cap);
}

double misalignment_db(const std::vector<double>& true_taps,
                       const std::vector<double>& estimated_taps) {
  if (estimated_taps.empty()) throw ConfigError("misalignment: empty estimate");
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < estimated_taps.size(); ++i) {
    const double h = i < true_taps.size() ? true_taps[i] : 0.0;
    diff += (h - estimated_taps[i]) * (h - estimated_taps[i]);
    ref += h * h;
  }
  if (ref == 0.0) throw ConfigError("misalignment: zero-energy true path");
  const double v = 20.0 * std::log10(std::sqrt(diff / ref) + 1e-300);
  return std::max(v, -100.0);
}

double ErleTracker::push(double mic_energy, double out_energy, bool echo_only) {
  if (echo_only) {
    if (!seen_) {
      sy_ = mic_energy;
      se_ = out_energy;
      seen_ = true;
    } else {
      sy_ = 0.98 * sy_ + 0.02 * mic_energy;
      se_ = 0.98 * se_ + 0.02 * out_energy;
    }
    if (sy_ <= 0.0) last_ = 0.0;
    else if (se_ <= 0.0) last_ = 80.0;
    else last_ = std::min(80.0, 10.0 * std::log10(sy_ / se_));
  }
  return last_;
}

EvalReport evaluate(const TimeSignal& farend, const RenderedScene& rendered,
                    const std::vector<std::pair<std::size_t, Rir>>& schedule,
                    const BlockConfig& cfg, const BlockStepper& stepper,
                    const PathProbe& probe) {
  cfg.validate();
  if (schedule.empty()) throw ConfigError("evaluate: empty rir schedule");
  const std::size_t r = cfg.hop;
  const std::size_t n_frames = farend.samples.size() / r;
  if (rendered.mic.samples.size() < n_frames * r)
    throw ConfigError("evaluate: mic shorter than the far end");

  EvalReport rep;
  rep.erle_curve.reserve(n_frames);
  rep.misalignment_curve.reserve(n_frames);
  ErleTracker erle;
  std::vector<double> out_cat;
  out_cat.reserve(n_frames * r);

  std::size_t active = 0;
  for (std::size_t i = 0; i < n_frames; ++i) {
    const std::size_t t0 = i * r;
    while (active + 1 < schedule.size() && schedule[active + 1].first <= t0)
      ++active;

    auto out = stepper(std::span(farend.samples).subspan(t0, r),
                       std::span(rendered.mic.samples).subspan(t0, r));
    if (out.size() != r) throw ConfigError("evaluate: stepper block size");
    out_cat.insert(out_cat.end(), out.begin(), out.end());

    double ey = 0.0, eo = 0.0, es = 0.0;
    for (std::size_t j = 0; j < r; ++j) {
      ey += rendered.mic.samples[t0 + j] * rendered.mic.samples[t0 + j];
      eo += out[j] * out[j];
      es += rendered.nearend_aligned.samples[t0 + j] *
            rendered.nearend_aligned.samples[t0 + j];
    }
    rep.erle_curve.push_back(erle.push(ey, eo, es == 0.0));

    std::vector<double> truth = schedule[active].second.taps;
    truth.resize(r, 0.0);
    rep.misalignment_curve.push_back(misalignment_db(truth, probe()));
  }

  rep.final_erle = rep.erle_curve.empty() ? 0.0 : rep.erle_curve.back();

  const std::size_t n = out_cat.size();
  if (n > 0) {
    rep.si_sdr_in =
        si_sdr_db(std::span(rendered.mic.samples).first(n),
                  std::span(rendered.nearend_aligned.samples).first(n));
    rep.si_sdr_out =
        si_sdr_db(out_cat, std::span(rendered.nearend_aligned.samples).first(n));
  }

  if (schedule.size() > 1) {
    const std::size_t change_frame = schedule[1].first / r;
    for (std::size_t i = change_frame; i < rep.misalignment_curve.size(); ++i) {
      if (rep.misalignment_curve[i] <= -15.0) {
        rep.reconvergence_frames = i - change_frame;
        break;
      }
    }
  }
  return rep;
}

void write_metrics_csv(const std::string& path, const EvalReport& report) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "frame,erle_db,misalign_db\n";
  for (std::size_t i = 0; i < report.erle_curve.size(); ++i)
    f << i << "," << report.erle_curve[i] << ","
      << report.misalignment_curve[i] << "\n";
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace nk
