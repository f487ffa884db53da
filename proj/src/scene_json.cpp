#include "nk/scene_json.hpp"

#include <cmath>
#include <fstream>

#include "nk/common.hpp"
#include "nk/rng.hpp"

namespace nk {

namespace {

using nlohmann::json;

constexpr double kFs = 16000.0;

void expect_keys(const json& j, const std::string& where,
                 std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigError("scene spec: " + where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (key == a) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("scene spec: unknown key \"" + key + "\" in " +
                        where);
  }
}

double num(const json& j, const std::string& where) {
  if (!j.is_number())
    throw ConfigError("scene spec: " + where + " must be a number");
  return j.get<double>();
}

SourceSpec parse_source(const json& j, const std::string& where) {
  expect_keys(j, where, {"kind", "level"});
  SourceSpec s;
  if (j.contains("kind")) {
    if (!j["kind"].is_string())
      throw ConfigError("scene spec: " + where + ".kind must be a string");
    s.kind = j["kind"].get<std::string>();
  }
  if (j.contains("level")) s.level = num(j["level"], where + ".level");
  if (s.kind != "ar2" && s.kind != "bursts" && s.kind != "white")
    throw ConfigError("scene spec: " + where + ".kind must be ar2, bursts,"
                      " or white");
  if (!(s.level > 0.0))
    throw ConfigError("scene spec: " + where + ".level must be > 0");
  return s;
}

std::array<double, 3> parse_vec3(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3)
    throw ConfigError("scene spec: " + where + " must be [x, y, z]");
  return {num(j[0], where), num(j[1], where), num(j[2], where)};
}

PathSpec parse_path(const json& j, const std::string& where) {
  expect_keys(j, where, {"at_s", "fir", "room"});
  PathSpec p;
  if (j.contains("at_s")) p.at_s = num(j["at_s"], where + ".at_s");
  if (p.at_s < 0.0)
    throw ConfigError("scene spec: " + where + ".at_s must be >= 0");
  if (j.contains("fir") == j.contains("room"))
    throw ConfigError("scene spec: " + where +
                      " needs exactly one of \"fir\" or \"room\"");
  if (j.contains("fir")) {
    const json& f = j["fir"];
    expect_keys(f, where + ".fir", {"taps", "decay"});
    if (f.contains("taps")) {
      const double t = num(f["taps"], where + ".fir.taps");
      if (t < 1.0 || t != std::floor(t))
        throw ConfigError("scene spec: " + where +
                          ".fir.taps must be a positive integer");
      p.fir_taps = (std::size_t)t;
    }
    if (f.contains("decay"))
      p.fir_decay = num(f["decay"], where + ".fir.decay");
    if (!(p.fir_decay > 0.0))
      throw ConfigError("scene spec: " + where + ".fir.decay must be > 0");
  } else {
    const json& r = j["room"];
    expect_keys(r, where + ".room",
                {"dimensions", "source_pos", "mic_pos", "rt60", "max_order"});
    p.use_room = true;
    if (r.contains("dimensions"))
      p.room.dimensions = parse_vec3(r["dimensions"], where + ".dimensions");
    if (r.contains("source_pos"))
      p.room.source_pos = parse_vec3(r["source_pos"], where + ".source_pos");
    if (r.contains("mic_pos"))
      p.room.mic_pos = parse_vec3(r["mic_pos"], where + ".mic_pos");
    if (r.contains("rt60")) p.room.rt60 = num(r["rt60"], where + ".rt60");
    if (r.contains("max_order")) {
      const double m = num(r["max_order"], where + ".max_order");
      if (m < 0.0 || m != std::floor(m))
        throw ConfigError("scene spec: " + where +
                          ".room.max_order must be a non-negative integer");
      p.max_order = (int)m;
    }
    p.room.fs = kFs;
    p.room.validate();
  }
  return p;
}

TimeSignal gen_source(const SourceSpec& s, std::size_t n, Rng& rng) {
  if (s.kind == "white") return gen_white(n, kFs, s.level, rng);
  if (s.kind == "bursts") return gen_noise_bursts(n, kFs, s.level, rng);
  return gen_ar2_speech(n, kFs, s.level, rng);
}

}  // namespace

void SceneSpec::validate() const {
  if (!(duration_s > 0.0))
    throw ConfigError("scene spec: duration_s must be > 0");
  if (!std::isfinite(ser_db))
    throw ConfigError("scene spec: ser_db must be finite");
  if (paths.empty())
    throw ConfigError("scene spec: at least one path entry is required");
  if (paths.front().at_s != 0.0)
    throw ConfigError("scene spec: the first path must start at at_s = 0");
  for (std::size_t i = 1; i < paths.size(); ++i)
    if (paths[i].at_s <= paths[i - 1].at_s)
      throw ConfigError("scene spec: path at_s values must be increasing");
  nonlinearity.validate();
}

SceneSpec parse_scene_spec(const nlohmann::json& j) {
  expect_keys(j, "spec",
              {"seed", "duration_s", "ser_db", "farend", "nearend",
               "nonlinearity", "paths"});
  SceneSpec s;
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned())
      throw ConfigError("scene spec: seed must be a non-negative integer");
    s.seed = j["seed"].get<std::uint64_t>();
  }
  if (!j.contains("duration_s"))
    throw ConfigError("scene spec: duration_s is required");
  s.duration_s = num(j["duration_s"], "duration_s");
  if (j.contains("ser_db")) s.ser_db = num(j["ser_db"], "ser_db");
  if (!j.contains("farend"))
    throw ConfigError("scene spec: farend is required");
  s.farend = parse_source(j["farend"], "farend");
  if (j.contains("nearend"))
    s.nearend = parse_source(j["nearend"], "nearend");

  if (j.contains("nonlinearity")) {
    const json& nl = j["nonlinearity"];
    expect_keys(nl, "nonlinearity", {"kind", "x_max", "gain"});
    if (!nl.contains("kind") || !nl["kind"].is_string())
      throw ConfigError("scene spec: nonlinearity.kind must be a string");
    const std::string kind = nl["kind"].get<std::string>();
    using K = NonlinearitySpec::Kind;
    if (kind == "none")
      s.nonlinearity.kind = K::None;
    else if (kind == "hard_clip")
      s.nonlinearity.kind = K::HardClip;
    else if (kind == "sigmoidal")
      s.nonlinearity.kind = K::Sigmoidal;
    else if (kind == "cascade")
      s.nonlinearity.kind = K::Cascade;
    else
      throw ConfigError("scene spec: nonlinearity.kind must be none,"
                        " hard_clip, sigmoidal, or cascade");
    if (nl.contains("x_max"))
      s.nonlinearity.x_max = num(nl["x_max"], "nonlinearity.x_max");
    if (nl.contains("gain"))
      s.nonlinearity.gain = num(nl["gain"], "nonlinearity.gain");
  }

  if (!j.contains("paths") || !j["paths"].is_array())
    throw ConfigError("scene spec: paths must be an array");
  for (std::size_t i = 0; i < j["paths"].size(); ++i)
    s.paths.push_back(
        parse_path(j["paths"][i], "paths[" + std::to_string(i) + "]"));

  s.validate();
  return s;
}

SceneSpec load_scene_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_scene_spec(j);
}

nlohmann::json resolved_scene_json(const SceneSpec& spec) {
  nlohmann::json j;
  j["seed"] = spec.seed;
  j["duration_s"] = spec.duration_s;
  j["ser_db"] = spec.ser_db;
  auto source = [](const SourceSpec& s) {
    return nlohmann::json{{"kind", s.kind}, {"level", s.level}};
  };
  j["farend"] = source(spec.farend);
  if (spec.nearend) j["nearend"] = source(*spec.nearend);
  using K = NonlinearitySpec::Kind;
  const char* kind = spec.nonlinearity.kind == K::None        ? "none"
                     : spec.nonlinearity.kind == K::HardClip  ? "hard_clip"
                     : spec.nonlinearity.kind == K::Sigmoidal ? "sigmoidal"
                                                              : "cascade";
  j["nonlinearity"] = {{"kind", kind},
                       {"x_max", spec.nonlinearity.x_max},
                       {"gain", spec.nonlinearity.gain}};
  j["paths"] = nlohmann::json::array();
  for (const PathSpec& p : spec.paths) {
    nlohmann::json e;
    e["at_s"] = p.at_s;
    if (p.use_room)
      e["room"] = {{"dimensions", p.room.dimensions},
                   {"source_pos", p.room.source_pos},
                   {"mic_pos", p.room.mic_pos},
                   {"rt60", p.room.rt60},
                   {"max_order", p.max_order}};
    else
      e["fir"] = {{"taps", p.fir_taps}, {"decay", p.fir_decay}};
    j["paths"].push_back(std::move(e));
  }
  return j;
}

EchoScene build_scene(const SceneSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  const std::size_t n = (std::size_t)std::llround(spec.duration_s * kFs);

  EchoScene sc;
  sc.seed = spec.seed;
  sc.ser_db = spec.ser_db;
  sc.nonlinearity = spec.nonlinearity;
  {
    Rng r = root.fork(1);
    sc.farend = gen_source(spec.farend, n, r);
  }
  if (spec.nearend) {
    Rng r = root.fork(2);
    sc.nearend = gen_source(*spec.nearend, n, r);
  }
  for (std::size_t i = 0; i < spec.paths.size(); ++i) {
    const PathSpec& p = spec.paths[i];
    const auto start = (std::size_t)std::llround(p.at_s * kFs);
    Rir rir;
    if (p.use_room) {
      rir = image_source_rir(p.room, p.max_order);
    } else {
      Rng r = root.fork(16 + i);
      rir = random_fir(p.fir_taps, p.fir_decay, kFs, r);
    }
    sc.rir_schedule.emplace_back(start, std::move(rir));
  }
  return sc;
}

}  // namespace nk
