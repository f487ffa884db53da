// nkaec: scene simulation, echo cancellation, training, evaluation, and
// gradient checking from one binary. Exit codes: 0 ok, 2 bad config or
// I/O, 3 numerical divergence, 1 anything else.
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nk/common.hpp"
#include "nk/fdkf.hpp"
#include "nk/metrics.hpp"
#include "nk/model.hpp"
#include "nk/neural.hpp"
#include "nk/rng.hpp"
#include "nk/scene.hpp"
#include "nk/scene_json.hpp"
#include "nk/train.hpp"
#include "nk/wav.hpp"

namespace {

using nlohmann::json;
using namespace nk;

constexpr double kFs = 16000.0;

// NK_SEED wins over config files and flags everywhere
void apply_env_seed(std::uint64_t& seed) {
  const char* env = std::getenv("NK_SEED");
  if (env == nullptr || *env == '\0') return;
  std::uint64_t v = 0;
  const char* end = env + std::string_view(env).size();
  const auto [ptr, ec] = std::from_chars(env, end, v);
  if (ec != std::errc{} || ptr != end)
    throw ConfigError(std::string("NK_SEED is not a valid seed: ") + env);
  seed = v;
}

struct Preset {
  BlockConfig block;
  ModelConfig model;
};

Preset make_preset(const std::string& name) {
  if (name == "desk") return {{32, 64}, ModelConfig::desk()};
  if (name == "paper") return {{256, 512}, ModelConfig::paper()};
  throw ConfigError("unknown preset \"" + name + "\" (desk or paper)");
}

TimeSignal read_pipeline_wav(const std::string& path) {
  TimeSignal x = read_wav(path);
  if (x.sample_rate != kFs)
    throw ConfigError(path + ": expected 16 kHz audio, got " +
                      std::to_string((int)x.sample_rate) + " Hz");
  return x;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path);
  f << j.dump(2) << '\n';
  if (!f) throw IoError("short write to " + path);
}

// ---- simulate

void cmd_simulate(const std::string& spec_path, const std::string& out_dir) {
  SceneSpec spec = load_scene_spec(spec_path);
  apply_env_seed(spec.seed);
  const EchoScene scene = build_scene(spec);
  const RenderedScene rendered = render_scene(scene);

  std::filesystem::create_directories(out_dir);
  const auto path = [&](const char* name) {
    return (std::filesystem::path(out_dir) / name).string();
  };
  write_wav(path("mic.wav"), rendered.mic);
  write_wav(path("farend.wav"), scene.farend);
  write_wav(path("echo.wav"), rendered.echo);
  if (!scene.nearend.samples.empty())
    write_wav(path("nearend.wav"), rendered.nearend_aligned);

  const json resolved = resolved_scene_json(spec);
  write_json_file(path("scene.json"), resolved);
  std::cout << resolved.dump(2) << '\n';
}

// ---- process

struct ProcessArgs {
  std::string algo = "fdkf";
  std::string variant = "g_A";
  std::string preset = "desk";
  std::string weights, in, farend, out, trace;
  double mu = 0.5;
  std::uint64_t seed = 0;
};

struct TraceRow {
  std::size_t frame;
  double a_hat, mic_energy, out_energy;
};

void write_trace_csv(const std::string& path,
                     const std::vector<TraceRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path);
  f << "frame,a_hat,mic_energy,out_energy\n" << std::setprecision(17);
  for (const TraceRow& r : rows)
    f << r.frame << ',' << r.a_hat << ',' << r.mic_energy << ','
      << r.out_energy << '\n';
  if (!f) throw IoError("short write to " + path);
}

ModelWeights resolve_weights(const ProcessArgs& a, const ModelConfig& model) {
  if (!a.weights.empty()) return load_weights(a.weights, model);
  return init_weights(model, a.seed);
}

void cmd_process(ProcessArgs a) {
  apply_env_seed(a.seed);
  const Preset preset = make_preset(a.preset);
  const TimeSignal far = read_pipeline_wav(a.farend);
  const TimeSignal mic = read_pipeline_wav(a.in);
  const std::size_t r = preset.block.hop;
  const std::size_t frames = std::min(far.samples.size(),
                                      mic.samples.size()) / r;
  if (frames == 0)
    throw ConfigError("inputs are shorter than one block (" +
                      std::to_string(r) + " samples)");

  std::vector<double> out;
  out.reserve(frames * r);
  std::vector<TraceRow> trace;
  trace.reserve(frames);
  const std::span<const double> fx(far.samples), mx(mic.samples);

  if (a.algo == "nlms") {
    NlmsConfig cfg;
    cfg.block = preset.block;
    cfg.mu = a.mu;
    NlmsFilter filt(cfg);
    for (std::size_t k = 0; k < frames; ++k) {
      const auto xb = fx.subspan(k * r, r), yb = mx.subspan(k * r, r);
      const std::vector<double> ob = filt.step(xb, yb);
      double ey = 0, eo = 0;
      for (double v : yb) ey += v * v;
      for (double v : ob) eo += v * v;
      trace.push_back({k, 0.0, ey, eo});
      out.insert(out.end(), ob.begin(), ob.end());
    }
  } else if (a.algo == "fdkf" || a.algo == "neuralkalman") {
    EngineConfig ecfg;
    ecfg.fdkf.block = preset.block;
    ecfg.model = preset.model;
    ecfg.variant =
        a.algo == "fdkf" ? Variant::Fdkf : parse_variant(a.variant);
    ModelWeights w;
    if (ecfg.variant != Variant::Fdkf) w = resolve_weights(a, preset.model);
    const WeightsView view = weights_view(w, nullptr);
    NeuralKalmanEngine eng(ecfg, view, nullptr);
    for (std::size_t k = 0; k < frames; ++k) {
      StepTrace st;
      const Var o = eng.step(fx.subspan(k * r, r), mx.subspan(k * r, r), &st);
      trace.push_back({k, st.a_hat, st.mic_energy, st.out_energy});
      out.insert(out.end(), o.v().data.begin(), o.v().data.end());
    }
  } else {
    throw ConfigError("unknown algo \"" + a.algo +
                      "\" (nlms, fdkf, or neuralkalman)");
  }

  write_wav(a.out, {out, kFs});
  if (!a.trace.empty()) write_trace_csv(a.trace, trace);
  std::cout << "processed " << frames << " blocks -> " << a.out << '\n';
}

// ---- train

struct TrainArgs {
  std::string variant = "g_t_A";
  std::string preset = "desk";
  std::string config, out, curve;
  std::uint64_t seed = 0;
  bool seed_flag = false;
  std::size_t jobs = 0;  // 0 = take the config value
};

struct TrainSpec {
  TrainConfig train;
  double utterance_s = 1.0;
  std::uint64_t init_seed = 0;
  bool init_seed_given = false;
};

TrainSpec parse_train_spec(const json& j) {
  static const std::vector<std::string> allowed{
      "lr",         "t_lr_scale",  "beta1",        "beta2",
      "adam_eps",   "grad_clip_norm", "epochs",   "steps_per_epoch",
      "batch_size", "jobs",        "seed",         "checkpoint_every",
      "alpha",      "si_sdr_cap",  "utterance_s",  "init_seed"};
  if (!j.is_object()) throw ConfigError("train config must be an object");
  for (const auto& [key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("train config: unknown key \"" + key + "\"");

  TrainSpec s;
  const auto dbl = [&](const char* k, double& into) {
    if (!j.contains(k)) return;
    if (!j[k].is_number())
      throw ConfigError(std::string("train config: ") + k +
                        " must be a number");
    into = j[k].get<double>();
  };
  const auto uns = [&](const char* k, auto& into) {
    if (!j.contains(k)) return;
    if (!j[k].is_number_unsigned())
      throw ConfigError(std::string("train config: ") + k +
                        " must be a non-negative integer");
    into = j[k].get<std::remove_reference_t<decltype(into)>>();
  };
  dbl("lr", s.train.lr);
  dbl("t_lr_scale", s.train.t_lr_scale);
  dbl("beta1", s.train.beta1);
  dbl("beta2", s.train.beta2);
  dbl("adam_eps", s.train.adam_eps);
  dbl("grad_clip_norm", s.train.grad_clip_norm);
  uns("epochs", s.train.epochs);
  uns("steps_per_epoch", s.train.steps_per_epoch);
  uns("batch_size", s.train.batch_size);
  uns("jobs", s.train.jobs);
  uns("seed", s.train.seed);
  uns("checkpoint_every", s.train.checkpoint_every);
  dbl("alpha", s.train.loss.alpha);
  dbl("si_sdr_cap", s.train.loss.si_sdr_cap);
  dbl("utterance_s", s.utterance_s);
  if (j.contains("init_seed")) {
    uns("init_seed", s.init_seed);
    s.init_seed_given = true;
  }
  if (!(s.utterance_s > 0.0))
    throw ConfigError("train config: utterance_s must be > 0");
  s.train.validate();
  return s;
}

void cmd_train(TrainArgs a) {
  TrainSpec spec;
  if (!a.config.empty()) {
    std::ifstream f(a.config);
    if (!f) throw IoError("cannot open " + a.config);
    json j;
    try {
      f >> j;
    } catch (const json::parse_error& e) {
      throw ConfigError(a.config + ": " + e.what());
    }
    spec = parse_train_spec(j);
  }
  if (a.seed_flag) spec.train.seed = a.seed;
  if (a.jobs != 0) spec.train.jobs = a.jobs;
  apply_env_seed(spec.train.seed);
  if (!spec.init_seed_given) spec.init_seed = spec.train.seed;

  const Preset preset = make_preset(a.preset);
  EngineConfig ecfg;
  ecfg.fdkf.block = preset.block;
  ecfg.model = preset.model;
  ecfg.variant = parse_variant(a.variant);

  json resolved;
  resolved["variant"] = variant_name(ecfg.variant);
  resolved["preset"] = a.preset;
  resolved["lr"] = spec.train.lr;
  resolved["t_lr_scale"] = spec.train.t_lr_scale;
  resolved["beta1"] = spec.train.beta1;
  resolved["beta2"] = spec.train.beta2;
  resolved["adam_eps"] = spec.train.adam_eps;
  resolved["grad_clip_norm"] = spec.train.grad_clip_norm;
  resolved["epochs"] = spec.train.epochs;
  resolved["steps_per_epoch"] = spec.train.steps_per_epoch;
  resolved["batch_size"] = spec.train.batch_size;
  resolved["jobs"] = spec.train.jobs;
  resolved["seed"] = spec.train.seed;
  resolved["init_seed"] = spec.init_seed;
  resolved["checkpoint_every"] = spec.train.checkpoint_every;
  resolved["alpha"] = spec.train.loss.alpha;
  resolved["si_sdr_cap"] = spec.train.loss.si_sdr_cap;
  resolved["utterance_s"] = spec.utterance_s;
  resolved["out"] = a.out;
  std::cout << resolved.dump(2) << '\n';

  const ModelWeights init = init_weights(preset.model, spec.init_seed);
  const SceneGenerator gen =
      make_desk_generator(preset.block, spec.utterance_s, spec.train.seed);
  const TrainResult res = train_loop(ecfg, spec.train, init, gen, a.out);

  const std::string curve =
      a.curve.empty() ? a.out + "_curve.csv" : a.curve;
  write_train_csv(curve, res.curve);
  std::size_t skipped = 0;
  for (const TrainRow& row : res.curve)
    if (std::isnan(row.loss)) ++skipped;
  std::cout << "trained " << res.curve.size() << " steps (" << skipped
            << " skipped), weights -> " << a.out << ".nkwt\n";
}

// ---- eval

struct EvalArgs {
  std::string scene, algo = "fdkf", variant = "g_A", preset = "desk";
  std::string weights, report, csv;
  double mu = 0.5;
  std::uint64_t seed = 0;
};

void cmd_eval(EvalArgs a) {
  SceneSpec spec = load_scene_spec(a.scene);
  apply_env_seed(spec.seed);
  const EchoScene scene = build_scene(spec);
  const RenderedScene rendered = render_scene(scene);
  const Preset preset = make_preset(a.preset);

  BlockStepper stepper;
  PathProbe probe;
  NlmsFilter* nlms = nullptr;
  NeuralKalmanEngine* engine = nullptr;
  std::unique_ptr<NlmsFilter> nlms_box;
  std::unique_ptr<NeuralKalmanEngine> engine_box;
  ModelWeights w;
  WeightsView view;

  if (a.algo == "nlms") {
    NlmsConfig cfg;
    cfg.block = preset.block;
    cfg.mu = a.mu;
    nlms_box = std::make_unique<NlmsFilter>(cfg);
    nlms = nlms_box.get();
    stepper = [nlms](std::span<const double> x, std::span<const double> y) {
      return nlms->step(x, y);
    };
    probe = [nlms] { return nlms->echo_path_estimate(); };
  } else if (a.algo == "fdkf" || a.algo == "neuralkalman") {
    EngineConfig ecfg;
    ecfg.fdkf.block = preset.block;
    ecfg.model = preset.model;
    ecfg.variant =
        a.algo == "fdkf" ? Variant::Fdkf : parse_variant(a.variant);
    if (ecfg.variant != Variant::Fdkf) {
      w = a.weights.empty() ? init_weights(preset.model, a.seed)
                            : load_weights(a.weights, preset.model);
    }
    view = weights_view(w, nullptr);
    engine_box = std::make_unique<NeuralKalmanEngine>(ecfg, view, nullptr);
    engine = engine_box.get();
    stepper = [engine](std::span<const double> x, std::span<const double> y) {
      const Var o = engine->step(x, y);
      return o.v().data;
    };
    probe = [engine] { return engine->echo_path_estimate(); };
  } else {
    throw ConfigError("unknown algo \"" + a.algo +
                      "\" (nlms, fdkf, or neuralkalman)");
  }

  const EvalReport rep = evaluate(scene.farend, rendered, scene.rir_schedule,
                                  preset.block, stepper, probe);
  if (!a.csv.empty()) write_metrics_csv(a.csv, rep);

  json j;
  j["algo"] = a.algo;
  if (a.algo == "neuralkalman") j["variant"] = a.variant;
  j["preset"] = a.preset;
  j["seed"] = spec.seed;
  j["frames"] = rep.erle_curve.size();
  j["final_erle_db"] = rep.final_erle;
  j["si_sdr_in_db"] = rep.si_sdr_in;
  j["si_sdr_out_db"] = rep.si_sdr_out;
  if (rep.reconvergence_frames)
    j["reconvergence_frames"] = *rep.reconvergence_frames;
  else
    j["reconvergence_frames"] = nullptr;
  if (!a.report.empty()) write_json_file(a.report, j);
  std::cout << j.dump(2) << '\n';
}

// ---- gradcheck

struct GradArgs {
  std::string scale = "all";  // primitives | engine | all
  std::size_t probes = 100;
  std::size_t frames = 10;
  double tol_primitives = 1e-6;
  double tol_engine = 1e-4;
  std::uint64_t seed = 0;
};

Tensor rnd(Rng& rng, std::vector<std::size_t> shape, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

Tensor rnd_signed(Rng& rng, std::vector<std::size_t> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data)
    v = rng.uniform(0.4, 1.4) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  return t;
}

bool check_primitives(std::uint64_t seed, double tol) {
  using Params = std::map<std::string, Var>;
  struct Case {
    std::string name;
    std::map<std::string, Tensor> params;
    std::function<Var(const Params&, Tape*)> fn;
  };
  Rng rng(seed);
  std::vector<Case> cases;
  const auto p1 = [](const Params& p) { return p.at("a"); };
  const auto p2 = [](const Params& p) { return p.at("b"); };

  cases.push_back({"add_mul_sub",
                   {{"a", rnd_signed(rng, {6})}, {"b", rnd_signed(rng, {6})}},
                   [&](const Params& p, Tape*) {
                     return sum(mul(add(p1(p), p2(p)), sub(p1(p), p2(p))));
                   }});
  cases.push_back({"divide",
                   {{"a", rnd_signed(rng, {5})}, {"b", rnd(rng, {5}, 0.5, 2.0)}},
                   [&](const Params& p, Tape*) {
                     return sum(divide(p1(p), p2(p)));
                   }});
  cases.push_back({"relu_neg_scale",
                   {{"a", rnd_signed(rng, {8})}},
                   [&](const Params& p, Tape*) {
                     return sum(relu(scale(neg(p1(p)), 1.7)));
                   }});
  cases.push_back({"exp_log",
                   {{"a", rnd(rng, {5}, 0.5, 1.5)}},
                   [&](const Params& p, Tape*) {
                     return sum(vlog(vexp(scale(p1(p), 0.5))));
                   }});
  cases.push_back({"tanh_sigmoid_softplus",
                   {{"a", rnd_signed(rng, {6})}},
                   [&](const Params& p, Tape*) {
                     return sum(vtanh(sigmoid(softplus(p1(p)))));
                   }});
  cases.push_back({"sqrt_abs",
                   {{"a", rnd_signed(rng, {6})}},
                   [&](const Params& p, Tape*) {
                     return sum(vsqrt(vabs(p1(p))));
                   }});
  cases.push_back({"matmul",
                   {{"a", rnd_signed(rng, {3, 4})}, {"b", rnd_signed(rng, {4})}},
                   [&](const Params& p, Tape*) {
                     return mean(matmul(p1(p), p2(p)));
                   }});
  cases.push_back({"bias_rows",
                   {{"a", rnd_signed(rng, {3, 5})}, {"b", rnd_signed(rng, {3})}},
                   [&](const Params& p, Tape*) {
                     return sum(bias_rows(p1(p), p2(p)));
                   }});
  cases.push_back({"slice_concat_reshape",
                   {{"a", rnd_signed(rng, {4})}, {"b", rnd_signed(rng, {4})}},
                   [&](const Params& p, Tape*) {
                     const Var c = concat(p1(p), p2(p));
                     return mean(reshape(slice(c, 2, 4), {2, 2}));
                   }});
  cases.push_back({"add_const_mean",
                   {{"a", rnd_signed(rng, {7})}},
                   [&](const Params& p, Tape*) {
                     return mean(add_const(p1(p), 0.25));
                   }});
  cases.push_back({"cmul_conj",
                   {{"a", rnd_signed(rng, {2, 4})}, {"b", rnd_signed(rng, {2, 4})}},
                   [&](const Params& p, Tape*) {
                     return sum(cabs2(cmul(p1(p), conj(p2(p)))));
                   }});
  cases.push_back({"crmul_crdiv",
                   {{"a", rnd_signed(rng, {2, 4})}, {"b", rnd(rng, {4}, 0.5, 2.0)}},
                   [&](const Params& p, Tape*) {
                     return sum(cabs2(crdiv(crmul(p1(p), p2(p)), p2(p))));
                   }});
  cases.push_back({"cabs",
                   {{"a", rnd_signed(rng, {2, 5})}},
                   [&](const Params& p, Tape*) { return sum(cabs(p1(p))); }});
  cases.push_back({"fft_ifft_roundtrip",
                   {{"a", rnd_signed(rng, {2, 8})}},
                   [&](const Params& p, Tape*) {
                     return sum(cabs2(ifft_c(fft_c(p1(p)))));
                   }});
  cases.push_back({"fft_projections",
                   {{"a", rnd_signed(rng, {2, 8})}},
                   [&](const Params& p, Tape*) {
                     const Var f = fft_c(proj_keep_first(p1(p), 3));
                     return sum(cabs2(proj_keep_last(f, 2)));
                   }});
  cases.push_back({"spectrum_mirror",
                   {{"a", rnd_signed(rng, {2, 8})}},
                   [&](const Params& p, Tape*) {
                     const Var os = onesided_spectrum(fft_c(p1(p)));
                     return sum(cabs2(mirror_spectrum(os)));
                   }});
  cases.push_back({"mirror_real",
                   {{"a", rnd_signed(rng, {5})}},
                   [&](const Params& p, Tape*) {
                     return sum(mirror_real(p1(p)));
                   }});
  cases.push_back({"conv1d",
                   {{"a", rnd_signed(rng, {2, 6})}, {"b", rnd_signed(rng, {3, 2, 3})}},
                   [&](const Params& p, Tape*) {
                     return sum(conv1d(p1(p), p2(p)));
                   }});

  bool all_ok = true;
  for (const Case& c : cases) {
    const GradCheckReport rep = grad_check(c.fn, c.params, tol, 0, seed);
    std::cout << "primitive " << c.name << ": worst " << std::scientific
              << std::setprecision(3) << rep.worst_rel_err
              << (rep.pass ? " ok" : " FAIL") << std::defaultfloat << '\n';
    all_ok = all_ok && rep.pass;
  }
  return all_ok;
}

bool check_engine(const GradArgs& a) {
  const Preset preset = make_preset("desk");
  EngineConfig ecfg;
  ecfg.fdkf.block = preset.block;
  ecfg.model = preset.model;
  ecfg.variant = Variant::G_Psi_T_A;
  const std::size_t r = preset.block.hop;
  const std::size_t frames = a.frames;

  Rng rng(a.seed + 17);
  std::vector<double> far(frames * r), mic(frames * r);
  for (double& v : far) v = 0.5 * rng.normal();
  for (std::size_t i = 0; i < mic.size(); ++i)
    mic[i] = 0.4 * far[i] + 0.1 * rng.normal();

  const ModelWeights mw = init_weights(preset.model, a.seed + 1);
  const auto fn = [&](const std::map<std::string, Var>& params, Tape* tape) {
    EngineConfig cfg = ecfg;
    NeuralKalmanEngine eng(cfg, params, tape);
    std::vector<Var> outs;
    const std::span<const double> fx(far), mx(mic);
    for (std::size_t k = 0; k < frames; ++k)
      outs.push_back(eng.step(fx.subspan(k * r, r), mx.subspan(k * r, r)));
    Var acc = mean(mul(outs[0], outs[0]));
    for (std::size_t k = 1; k < outs.size(); ++k)
      acc = add(acc, mean(mul(outs[k], outs[k])));
    return acc;
  };

  // smaller step than the primitive battery: the transition head's
  // inverse-DFT/forward-DFT scaling raises curvature along its input weights
  const GradCheckReport rep = grad_check(fn, mw.tensors, a.tol_engine,
                                         a.probes, a.seed + 2, 1e-5);
  std::cout << "engine (" << frames << " frames, " << rep.probes
            << " probes): worst " << std::scientific << std::setprecision(3)
            << rep.worst_rel_err << " at " << rep.worst_param
            << (rep.pass ? " ok" : " FAIL") << std::defaultfloat << '\n';
  return rep.pass;
}

int cmd_gradcheck(const GradArgs& a) {
  std::uint64_t seed = a.seed;
  apply_env_seed(seed);
  GradArgs eff = a;
  eff.seed = seed;
  bool ok = true;
  if (a.scale == "primitives" || a.scale == "all")
    ok = check_primitives(seed, a.tol_primitives) && ok;
  if (a.scale == "engine" || a.scale == "all") ok = check_engine(eff) && ok;
  if (a.scale != "primitives" && a.scale != "engine" && a.scale != "all")
    throw ConfigError("unknown scale \"" + a.scale +
                      "\" (primitives, engine, or all)");
  std::cout << (ok ? "gradcheck ok" : "gradcheck FAILED") << '\n';
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NeuralKalman acoustic echo cancellation toolkit"};
  app.require_subcommand(1);
  int rc = 0;

  std::string sim_spec, sim_out;
  auto* sim = app.add_subcommand("simulate",
                                 "Render a JSON scene spec to WAV files");
  sim->add_option("--spec", sim_spec, "scene spec JSON path")->required();
  sim->add_option("--out", sim_out, "output directory")->required();
  sim->callback([&] { cmd_simulate(sim_spec, sim_out); });

  ProcessArgs pa;
  auto* proc = app.add_subcommand("process", "Cancel echo from a recording");
  proc->add_option("--algo", pa.algo, "nlms, fdkf, or neuralkalman");
  proc->add_option("--variant", pa.variant,
                   "neuralkalman hook set, e.g. g_t_A");
  proc->add_option("--preset", pa.preset, "desk or paper geometry");
  proc->add_option("--weights", pa.weights, "trained weights (.nkwt)");
  proc->add_option("--in", pa.in, "mic WAV (16-bit mono 16 kHz)")->required();
  proc->add_option("--farend", pa.farend, "far-end reference WAV")->required();
  proc->add_option("--out", pa.out, "output WAV path")->required();
  proc->add_option("--trace", pa.trace,
                   "per-frame CSV: frame,a_hat,mic_energy,out_energy");
  proc->add_option("--mu", pa.mu, "NLMS step size");
  proc->add_option("--seed", pa.seed,
                   "weight init seed when no --weights is given");
  proc->callback([&] { cmd_process(pa); });

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train learned hooks end to end");
  trn->add_option("--variant", ta.variant, "hook set to train");
  trn->add_option("--preset", ta.preset, "desk or paper geometry");
  trn->add_option("--config", ta.config, "training config JSON");
  trn->add_option("--out", ta.out, "output weights stem")->required();
  trn->add_option("--curve", ta.curve,
                  "training curve CSV (default <out>_curve.csv)");
  trn->add_option("--jobs", ta.jobs, "worker threads for batch scenes");
  trn->add_option("--seed", ta.seed, "training seed")
      ->each([&](const std::string&) { ta.seed_flag = true; });
  trn->callback([&] { cmd_train(ta); });

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Run a scene and report metrics");
  ev->add_option("--scene", ea.scene, "scene spec JSON path")->required();
  ev->add_option("--algo", ea.algo, "nlms, fdkf, or neuralkalman");
  ev->add_option("--variant", ea.variant, "neuralkalman hook set");
  ev->add_option("--preset", ea.preset, "desk or paper geometry");
  ev->add_option("--weights", ea.weights, "trained weights (.nkwt)");
  ev->add_option("--mu", ea.mu, "NLMS step size");
  ev->add_option("--seed", ea.seed,
                 "weight init seed when no --weights is given");
  ev->add_option("--report", ea.report, "summary JSON output path");
  ev->add_option("--csv", ea.csv, "per-frame metrics CSV output path");
  ev->callback([&] { cmd_eval(ea); });

  GradArgs ga;
  auto* gc = app.add_subcommand("gradcheck",
                                "Finite-difference gradient verification");
  gc->add_option("--scale", ga.scale, "primitives, engine, or all");
  gc->add_option("--probes", ga.probes, "parameter entries to probe");
  gc->add_option("--frames", ga.frames, "unrolled frames for the engine run");
  gc->add_option("--tol", ga.tol_primitives, "primitive relative tolerance");
  gc->add_option("--tol-engine", ga.tol_engine, "engine relative tolerance");
  gc->add_option("--seed", ga.seed, "probe and data seed");
  gc->callback([&] { rc = cmd_gradcheck(ga); });

  try {
    app.parse(argc, argv);
    return rc;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 2;
  } catch (const DivergedError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
