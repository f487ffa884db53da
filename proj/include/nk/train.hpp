// End-to-end training of the learned filter components: adaptive-moment
// optimizer with global-norm clipping, full-utterance unrolled steps over
// synthetic desk scenes, and a deterministic training loop.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nk/loss.hpp"
#include "nk/model.hpp"
#include "nk/neural.hpp"
#include "nk/scene.hpp"

namespace nk {

struct TrainConfig {
  double lr = 1e-3;
  // learning-rate multiplier for the transition head's parameters; their
  // gradients run orders of magnitude above every other head because the
  // head sits inside the unrolled filter recursion, and the adaptive
  // optimizer would otherwise step the delicate identity wiring at the
  // same absolute size as everything else
  double t_lr_scale = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 5.0;
  std::size_t epochs = 1;
  std::size_t steps_per_epoch = 50;
  std::size_t batch_size = 1;
  std::size_t jobs = 1;  // scene-parallel workers inside one batch
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // steps; 0 = final checkpoint only
  LossConfig loss;

  void validate() const;
};

// Adam over named tensors; gradients are clipped to a shared global norm
// before the moment updates.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const TrainConfig& cfg);

  // one in-place update; returns the pre-clip global gradient norm
  double step(ModelWeights& w, std::map<std::string, Tensor> grads);
  std::size_t steps_taken() const { return t_; }

 private:
  TrainConfig cfg_;
  std::map<std::string, Tensor> m_, v_;
  std::size_t t_ = 0;
};

// one supervised utterance: filter inputs plus the aligned near-end target
struct TrainScene {
  std::vector<double> farend;
  std::vector<double> mic;
  std::vector<double> target;
};

// Desk-scale double-talk scene: surrogate speech far end through a hard
// clip and a short random echo path, near-end speech mixed at a random
// SER in [-10, 10] dB. Lengths come out as whole blocks.
TrainScene sample_desk_scene(const BlockConfig& blk, double seconds, Rng& rng);

// deterministic scene stream for train_loop: (step, batch index) -> scene
using SceneGenerator =
    std::function<std::vector<TrainScene>(std::size_t step, std::size_t n)>;
SceneGenerator make_desk_generator(const BlockConfig& blk, double seconds,
                                   std::uint64_t seed);

struct StepReport {
  double loss = 0.0;    // batch mean
  double si_sdr = 0.0;  // batch mean, clamped
  double grad_norm = 0.0;
  bool skipped = false;  // non-finite loss/gradients: no update applied
};

// forward + backward over the batch (gradients reduced in scene order),
// then one optimizer update
StepReport train_step(ModelWeights& w, const EngineConfig& ecfg,
                      const std::vector<TrainScene>& batch,
                      const TrainConfig& tcfg, AdamOptimizer& opt);

struct TrainRow {
  std::size_t step = 0;
  double loss = 0.0;
  double si_sdr = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  ModelWeights weights;
  std::vector<TrainRow> curve;
};

// epochs * steps_per_epoch optimizer steps over generated scenes; writes
// `<stem>.nkwt` + `<stem>.json` checkpoints when a stem is given
TrainResult train_loop(const EngineConfig& ecfg, const TrainConfig& tcfg,
                       ModelWeights init, const SceneGenerator& gen,
                       const std::string& checkpoint_stem = "");

void write_train_csv(const std::string& path,
                     const std::vector<TrainRow>& rows);

// weights + a JSON sidecar describing variant, model, and filter geometry
void save_checkpoint(const std::string& stem, const ModelWeights& w,
                     const EngineConfig& ecfg, std::size_t step);

// mean SI-SDR of an engine run across scenes (a diverged run scores -cap)
double evaluate_si_sdr(const EngineConfig& ecfg, const ModelWeights& w,
                       const std::vector<TrainScene>& scenes,
                       double cap = 30.0);

}  // namespace nk
