// JSON scene specifications for the CLI: a small declarative format that
// expands into a fully built EchoScene. Parsing is strict — unknown keys
// are rejected so typos fail loudly instead of silently using defaults.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "nk/scene.hpp"

namespace nk {

struct SourceSpec {
  std::string kind = "ar2";  // ar2 | bursts | white
  double level = 0.5;
};

// one echo-path segment: either a random exponential-decay FIR or an
// image-source room response, active from at_s onward
struct PathSpec {
  double at_s = 0.0;
  bool use_room = false;
  std::size_t fir_taps = 24;
  double fir_decay = 0.003;
  RoomSpec room;
  int max_order = 3;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  double duration_s = 0.0;
  double ser_db = 0.0;
  SourceSpec farend;
  std::optional<SourceSpec> nearend;
  NonlinearitySpec nonlinearity;
  std::vector<PathSpec> paths;

  void validate() const;
};

SceneSpec parse_scene_spec(const nlohmann::json& j);
SceneSpec load_scene_spec(const std::string& path);

// every field written back out, defaults included
nlohmann::json resolved_scene_json(const SceneSpec& spec);

// deterministic expansion at 16 kHz: sources and FIR paths are drawn from
// streams forked off the spec seed, so the same spec always renders the
// same audio
EchoScene build_scene(const SceneSpec& spec);

}  // namespace nk
