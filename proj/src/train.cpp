#include "nk/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <thread>

#include "nk/common.hpp"
#include "nk/metrics.hpp"
#include "nk/scene.hpp"

#include "json.hpp"

namespace nk {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr))
    throw ConfigError("train: lr must be finite and >= 0");
  if (!(t_lr_scale > 0.0) || !std::isfinite(t_lr_scale))
    throw ConfigError("train: t_lr_scale must be finite and > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0))
    throw ConfigError("train: beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train: beta2 must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be > 0");
  if (!(grad_clip_norm > 0.0))
    throw ConfigError("train: grad_clip_norm must be > 0");
  if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
  if (jobs == 0) throw ConfigError("train: jobs must be >= 1");
  loss.validate();
}

AdamOptimizer::AdamOptimizer(const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
}

double AdamOptimizer::step(ModelWeights& w,
                           std::map<std::string, Tensor> grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    auto it = w.tensors.find(name);
    if (it == w.tensors.end())
      throw ConfigError("optimizer: gradient for unknown tensor " + name);
    if (it->second.shape != g.shape)
      throw ConfigError("optimizer: gradient shape mismatch for " + name);
    for (double v : g.data) {
      if (!std::isfinite(v))
        throw ConfigError("optimizer: non-finite gradient for " + name);
      sq += v * v;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > cfg_.grad_clip_norm) {
    const double s = cfg_.grad_clip_norm / norm;
    for (auto& [name, g] : grads)
      for (double& v : g.data) v *= s;
  }

  t_ += 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t_);
  for (auto& [name, g] : grads) {
    Tensor& param = w.tensors.at(name);
    const double lr_eff =
        cfg_.lr * (name.starts_with("head.t.") ? cfg_.t_lr_scale : 1.0);
    auto mi = m_.find(name);
    if (mi == m_.end()) {
      mi = m_.emplace(name, Tensor::zeros(param.shape)).first;
      v_.emplace(name, Tensor::zeros(param.shape));
    }
    Tensor& m = mi->second;
    Tensor& v = v_.at(name);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g.data[i];
      v.data[i] =
          cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      param.data[i] -= lr_eff * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
    }
  }
  return norm;
}

// ---- scene sampling

TrainScene sample_desk_scene(const BlockConfig& blk, double seconds,
                             Rng& rng) {
  blk.validate();
  const double fs = 16000.0;
  const std::size_t r = blk.hop;
  std::size_t n = (std::size_t)std::ceil(seconds * fs / (double)r) * r;
  n = std::max(n, 4 * r);

  for (int attempt = 0; attempt < 8; ++attempt) {
    const double far_level = rng.uniform(0.3, 0.7);
    TimeSignal far = rng.uniform() < 0.7
                         ? gen_ar2_speech(n, fs, far_level, rng)
                         : gen_noise_bursts(n, fs, far_level, rng);
    TimeSignal near = gen_ar2_speech(n, fs, rng.uniform(0.3, 0.7), rng);

    const std::size_t taps = 8 + rng.integer(25);  // [8, 32]
    Rir rir = random_fir(taps, rng.uniform(0.002, 0.005), fs, rng);

    EchoScene sc;
    sc.farend = far;
    sc.nearend = near;
    sc.rir_schedule.emplace_back(0, std::move(rir));
    sc.nonlinearity.kind = NonlinearitySpec::Kind::HardClip;
    sc.nonlinearity.x_max = rng.uniform(0.6, 0.95);
    sc.ser_db = rng.uniform(-10.0, 10.0);
    sc.seed = rng.raw();
    RenderedScene rs = render_scene(sc);

    TrainScene out;
    out.farend = std::move(far.samples);  // clean reference, pre-clip
    out.mic = std::move(rs.mic.samples);
    out.target = std::move(rs.nearend_aligned.samples);
    out.farend.resize(n, 0.0);
    out.mic.resize(n, 0.0);
    out.target.resize(n, 0.0);

    double e = 0.0;
    for (double v : out.target) e += v * v;
    if (e > 0.0) return out;
  }
  throw ConfigError("sample_desk_scene: near end kept drawing silent");
}

SceneGenerator make_desk_generator(const BlockConfig& blk, double seconds,
                                   std::uint64_t seed) {
  const Rng base(seed);
  return [blk, seconds, base](std::size_t step, std::size_t n) {
    std::vector<TrainScene> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Rng child = base.fork(step * 0x10000ull + i);
      out.push_back(sample_desk_scene(blk, seconds, child));
    }
    return out;
  };
}

// ---- one optimizer step

namespace {

struct SceneResult {
  std::map<std::string, Tensor> grads;
  double loss = 0.0;
  double si_sdr = 0.0;
  bool ok = false;
};

// full-utterance unroll: forward every frame on one tape, one backward
SceneResult run_scene(const ModelWeights& w, const EngineConfig& ecfg,
                      const TrainScene& sc, const LossConfig& lcfg) {
  SceneResult res;
  const std::size_t r = ecfg.fdkf.block.hop;
  const std::size_t frames = sc.mic.size() / r;
  try {
    Tape tape;
    WeightsView view = weights_view(w, &tape);
    NeuralKalmanEngine eng(ecfg, view, &tape);
    std::vector<Var> outs;
    outs.reserve(frames);
    const std::span<const double> far(sc.farend), mic(sc.mic);
    for (std::size_t k = 0; k < frames; ++k)
      outs.push_back(eng.step(far.subspan(k * r, r), mic.subspan(k * r, r)));
    const Var est = concat_many(outs);

    LossParts parts;
    const Var total = training_loss(est, sc.target, ecfg.fdkf.block, lcfg,
                                    &parts);
    if (!std::isfinite(parts.total)) return res;
    res.loss = parts.total;
    res.si_sdr = parts.si_sdr;

    tape.backward(total);
    for (const auto& [name, var] : view) {
      Tensor g = tape.grad_of(var);
      for (double v : g.data)
        if (!std::isfinite(v)) return res;
      res.grads.emplace(name, std::move(g));
    }
    res.ok = true;
  } catch (const DivergedError&) {
    res.ok = false;
  }
  return res;
}

void validate_batch(const EngineConfig& ecfg,
                    const std::vector<TrainScene>& batch) {
  const std::size_t r = ecfg.fdkf.block.hop;
  for (const TrainScene& sc : batch) {
    if (sc.mic.empty() || sc.mic.size() % r != 0)
      throw ConfigError("train: mic length must be a positive block multiple");
    if (sc.farend.size() != sc.mic.size() ||
        sc.target.size() != sc.mic.size())
      throw ConfigError("train: farend/mic/target lengths must match");
  }
}

}  // namespace

StepReport train_step(ModelWeights& w, const EngineConfig& ecfg,
                      const std::vector<TrainScene>& batch,
                      const TrainConfig& tcfg, AdamOptimizer& opt) {
  tcfg.validate();
  ecfg.validate();
  if (batch.empty()) throw ConfigError("train: empty batch");
  validate_batch(ecfg, batch);

  std::vector<SceneResult> results(batch.size());
  const std::size_t workers =
      std::min<std::size_t>(tcfg.jobs, batch.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < batch.size(); ++i)
      results[i] = run_scene(w, ecfg, batch[i], tcfg.loss);
  } else {
    // scenes striped over threads; reduction below stays in scene order, so
    // the result is identical to the single-threaded path
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t j = 0; j < workers; ++j)
      pool.emplace_back([&, j] {
        for (std::size_t i = j; i < batch.size(); i += workers)
          results[i] = run_scene(w, ecfg, batch[i], tcfg.loss);
      });
    for (std::thread& th : pool) th.join();
  }

  StepReport rep;
  for (const SceneResult& r : results)
    if (!r.ok) {
      rep.skipped = true;
      rep.loss = std::numeric_limits<double>::quiet_NaN();
      rep.si_sdr = std::numeric_limits<double>::quiet_NaN();
      return rep;
    }

  std::map<std::string, Tensor> acc = std::move(results[0].grads);
  for (std::size_t i = 1; i < results.size(); ++i)
    for (auto& [name, g] : results[i].grads) {
      Tensor& a = acc.at(name);
      for (std::size_t k = 0; k < g.data.size(); ++k)
        a.data[k] += g.data[k];
    }
  const double inv = 1.0 / (double)results.size();
  double loss = 0.0, si = 0.0;
  for (const SceneResult& r : results) {
    loss += r.loss * inv;
    si += r.si_sdr * inv;
  }
  for (auto& [name, g] : acc)
    for (double& v : g.data) v *= inv;

  rep.grad_norm = opt.step(w, std::move(acc));
  rep.loss = loss;
  rep.si_sdr = si;
  return rep;
}

// ---- training loop

TrainResult train_loop(const EngineConfig& ecfg, const TrainConfig& tcfg,
                       ModelWeights init, const SceneGenerator& gen,
                       const std::string& checkpoint_stem) {
  tcfg.validate();
  ecfg.validate();
  TrainResult out;
  out.weights = std::move(init);
  AdamOptimizer opt(tcfg);
  const std::size_t total = tcfg.epochs * tcfg.steps_per_epoch;
  for (std::size_t step = 1; step <= total; ++step) {
    const auto scenes = gen(step, tcfg.batch_size);
    const auto t0 = std::chrono::steady_clock::now();
    const StepReport rep = train_step(out.weights, ecfg, scenes, tcfg, opt);
    const double wall = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
    out.curve.push_back({step, rep.loss, rep.si_sdr, wall});
    if (!checkpoint_stem.empty() && tcfg.checkpoint_every != 0 &&
        step % tcfg.checkpoint_every == 0)
      save_checkpoint(checkpoint_stem + "_" + std::to_string(step),
                      out.weights, ecfg, step);
  }
  if (!checkpoint_stem.empty())
    save_checkpoint(checkpoint_stem, out.weights, ecfg, total);
  return out;
}

void write_train_csv(const std::string& path,
                     const std::vector<TrainRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path);
  f << "step,loss,si_sdr,wall_ms\n";
  f << std::setprecision(17);
  for (const TrainRow& r : rows)
    f << r.step << ',' << r.loss << ',' << r.si_sdr << ','
      << std::fixed << std::setprecision(3) << r.wall_ms
      << std::defaultfloat << std::setprecision(17) << '\n';
  if (!f) throw IoError("short write to " + path);
}

void save_checkpoint(const std::string& stem, const ModelWeights& w,
                     const EngineConfig& ecfg, std::size_t step) {
  save_weights(w, stem + ".nkwt");
  nlohmann::json j;
  j["variant"] = variant_name(ecfg.variant);
  j["step"] = step;
  j["crf_on_mic"] = ecfg.crf_on_mic;
  const ModelConfig& m = ecfg.model;
  j["model"] = {{"n_bins", m.n_bins},
                {"lstm_layers", m.lstm_layers},
                {"lstm_hidden", m.lstm_hidden},
                {"t_lstm_hidden", m.t_lstm_hidden},
                {"crf_time_taps", m.crf_time_taps},
                {"crf_freq_taps", m.crf_freq_taps},
                {"crf_conv_kernel", m.crf_conv_kernel},
                {"feature_proj_dim", m.feature_proj_dim}};
  const FdkfConfig& fc = ecfg.fdkf;
  j["filter"] = {{"hop", fc.block.hop},
                 {"fft_size", fc.block.fft_size},
                 {"a_default", fc.a_default},
                 {"psi_vv_smoothing", fc.psi_vv_smoothing},
                 {"p_init", fc.p_init},
                 {"delta", fc.delta}};
  std::ofstream f(stem + ".json");
  if (!f) throw IoError("cannot open " + stem + ".json");
  f << j.dump(2) << '\n';
  if (!f) throw IoError("short write to " + stem + ".json");
}

double evaluate_si_sdr(const EngineConfig& ecfg, const ModelWeights& w,
                       const std::vector<TrainScene>& scenes, double cap) {
  ecfg.validate();
  if (scenes.empty()) throw ConfigError("evaluate: no scenes");
  validate_batch(ecfg, scenes);
  const std::size_t r = ecfg.fdkf.block.hop;
  double acc = 0.0;
  for (const TrainScene& sc : scenes) {
    double si;
    try {
      WeightsView view = weights_view(w, nullptr);
      NeuralKalmanEngine eng(ecfg, view, nullptr);
      std::vector<double> est;
      est.reserve(sc.mic.size());
      const std::span<const double> far(sc.farend), mic(sc.mic);
      for (std::size_t k = 0; k * r < sc.mic.size(); ++k) {
        const Var o = eng.step(far.subspan(k * r, r), mic.subspan(k * r, r));
        est.insert(est.end(), o.v().data.begin(), o.v().data.end());
      }
      si = si_sdr_db(est, sc.target, cap);
    } catch (const DivergedError&) {
      si = -cap;  // a diverged run scores the floor, not an exception
    }
    acc += si;
  }
  return acc / (double)scenes.size();
}

}  // namespace nk
