#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mvvd/dataset.hpp"
#include "mvvd/params.hpp"
#include "mvvd/text.hpp"
#include "mvvd/unet.hpp"

namespace mvvd {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  int64_t batch = 2;
  int64_t steps = 2000;
  double text_dropout = 0.1;
  int64_t clip_len = 8;  // frames per training clip (temporal/align phases)
  int64_t stride = 3;    // frame stride within a clip
  uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument on the first violation
};

// Per-parameter first/second moments, created lazily the first time a
// parameter is stepped and persisted across steps.
template <typename S>
struct AdamState {
  struct Moments {
    std::vector<S> m, v;
  };
  std::map<std::string, Moments> slots;
};

// Decoupled-weight-decay Adam with bias correction over the trainable slice:
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p.
// Gradients are read from the store's grad buffers; frozen parameters are
// never touched, and a nonzero gradient on one throws (it means the phase
// partition and the tape disagree). step_index counts from 1.
template <typename S>
void adamw_step(ParameterStore<S>& store, AdamState<S>& state, const TrainConfig& cfg,
                int64_t step_index) {
  cfg.validate();
  if (step_index < 1)
    throw std::invalid_argument("adamw_step: step_index counts from 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(step_index));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(step_index));
  for (auto& [name, e] : store.entries()) {
    const S* g = e.grad.raw();
    const size_t n = static_cast<size_t>(e.value.numel());
    if (!e.trainable) {
      for (size_t i = 0; i < n; ++i)
        if (g[i] != S(0))
          throw std::runtime_error("adamw_step: gradient present for frozen parameter '" +
                                   name + "'");
      continue;
    }
    auto& slot = state.slots[name];
    if (slot.m.empty()) {
      slot.m.assign(n, S(0));
      slot.v.assign(n, S(0));
    }
    if (slot.m.size() != n || slot.v.size() != n)
      throw std::invalid_argument("adamw_step: moment size mismatch for '" + name + "'");
    const S* p = e.value.raw();
    std::vector<S> out(n);
    for (size_t i = 0; i < n; ++i) {
      slot.m[i] = S(cfg.beta1 * double(slot.m[i]) + (1.0 - cfg.beta1) * double(g[i]));
      slot.v[i] =
          S(cfg.beta2 * double(slot.v[i]) + (1.0 - cfg.beta2) * double(g[i]) * double(g[i]));
      const double m_hat = double(slot.m[i]) / bc1;
      const double v_hat = double(slot.v[i]) / bc2;
      out[i] = S(double(p[i]) - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps) -
                 cfg.lr * cfg.weight_decay * double(p[i]));
    }
    e.value = AxisTensor<S>(e.value.axes(), std::move(out));
  }
}

// Which parameter groups a phase's model carries, and which paths its
// forward pass runs. The spatial pretrain is a pure per-frame multi-view
// denoiser; the temporal pretrain adds frame attention but no alignment;
// alignment exists only in the final phase.
ModelParts phase_parts(TrainPhase phase);
ForwardMode phase_mode(TrainPhase phase);

// One element of a training batch: a normalized clip slice, its (possibly
// dropped-out) caption tokens, and the element's diffusion timestep.
struct BatchElement {
  TrainingClip clip;
  TokenIds tokens;
  int64_t timestep = 0;
};

// Draws a batch from the kept clips. One view selection is drawn per batch
// and shared by every element (the network conditions on a single pose set):
// the spatial and align phases take an orthogonal 4-view slice at a random
// ring offset, the temporal phase a single random view. Per element the draw
// order is: clip index, start frame, timestep, caption dropout. The spatial
// phase uses one random frame; the others take clip_len frames at `stride`.
std::vector<BatchElement> assemble_batch(TrainPhase phase,
                                         const std::vector<MultiViewVideo>& clips,
                                         const ModelConfig& mcfg, const TrainConfig& tcfg,
                                         const Vocab& vocab, Rng& rng);

// Stacks batch elements along a leading "b" axis -> (b, v, f, c, h, w).
AxisTensor<float> stack_batch(const std::vector<BatchElement>& batch);

// Noise-prediction loss of the batch under the given forward mode; `noise`
// must match the stacked batch shape. Accumulates parameter gradients into
// the store when with_grads is set. Returns the scalar loss.
double compute_batch_loss(ParameterStore<float>& store, const ModelConfig& mcfg,
                          const ForwardMode& mode, const NoiseSchedule& sched,
                          const std::vector<BatchElement>& batch,
                          const AxisTensor<float>& noise, bool with_grads);

// Mid-run snapshot: parameter values, optimizer moments, the data/noise
// stream state, and the next step index. Restoring reproduces the remaining
// steps bit-exactly.
void save_train_state(const std::string& path, const ParameterStore<float>& store,
                      const AdamState<float>& state, const Rng& rng, int64_t next_step);
void load_train_state(const std::string& path, ParameterStore<float>& store,
                      AdamState<float>& state, Rng& rng, int64_t& next_step);

struct PhaseArtifacts {
  std::vector<double> losses;     // one entry per executed step, pre-update
  std::string init_checkpoint;    // full store before the first step (fresh runs)
  std::string final_checkpoint;   // full store after the last step
  std::string loss_csv;           // "step,loss" rows for the executed steps
  std::string state_file;         // resumable end-of-run snapshot
};

// Runs one training phase end to end on the dataset directory:
//   pretrain-spatial  — fresh spatial-only model, orthogonal 4-view single
//                       frames, trains the spatial + embedding groups;
//   pretrain-temporal — spatial groups restored from spatial_checkpoint and
//                       frozen, single-view clips, trains the temporal group;
//   align             — spatial and temporal groups restored and frozen,
//                       4-view clips, trains only the alignment layers
//                       (zero-initialized, so step 0 scores the plain
//                       combination of the two restored models).
// Writes model_init.mvzc / model_final.mvzc / loss.csv / train_state.bin
// into out_dir. When resume_state names a snapshot, the store, optimizer,
// stream, and step counter restart from it and only the remaining steps run.
// Fully deterministic given (configs, dataset, seed).
PhaseArtifacts run_training_phase(TrainPhase phase, const ModelConfig& mcfg,
                                  const TrainConfig& tcfg, const std::string& dataset_dir,
                                  const std::string& out_dir,
                                  const std::string& spatial_checkpoint = "",
                                  const std::string& temporal_checkpoint = "",
                                  const std::string& resume_state = "");

}  // namespace mvvd
