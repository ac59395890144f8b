#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "casreg/cascade.hpp"
#include "casreg/dataset.hpp"
#include "casreg/synth.hpp"

namespace casreg {

/// Bias-corrected Adam. Moments are float so checkpoints round-trip the
/// optimizer exactly.
struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<ArrayX<float>> m, v;  // aligned with model_tensors order
  std::int64_t t = 0;
  int skip_streak = 0;

  void init_for(CascadeModel& model) {
    m.clear();
    v.clear();
    for (auto& [name, tensor] : model_tensors(model)) {
      (void)name;
      m.push_back(ArrayX<float>::Zero(tensor->value.size()));
      v.push_back(ArrayX<float>::Zero(tensor->value.size()));
    }
    t = 0;
    skip_streak = 0;
  }
};

struct TrainConfig {
  std::int64_t total_steps = 2000;
  double base_lr = 1e-4;
  double half_at_frac1 = 0.6;
  double half_at_frac2 = 0.8;
  int batch_size = 1;
  std::uint64_t seed = 1;
  int cascades = 3;
  double lambda_tv = 0.5;
  double lambda_ortho = 0.1;
  double lambda_det = 0.1;
  int dim = 32;
  double max_disp = 4.0;
  double affine_jitter = 0.05;
  std::string data_dir;  // empty: generate pairs on the fly
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  int levels = 4;
  int base_channels = 16;
  int channel_mult = 1;

  void validate() const {
    if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (!(base_lr > 0)) throw ConfigError("base_lr must be > 0");
    if (!(half_at_frac1 > 0 && half_at_frac1 < half_at_frac2 &&
          half_at_frac2 < 1))
      throw ConfigError("halving fractions must satisfy 0 < f1 < f2 < 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (cascades < 1) throw ConfigError("cascades must be >= 1");
    if (dim < 16 || dim % 16) throw ConfigError("dim must be >= 16 and divisible by 16");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  }

  DeformableNetConfig deformable_cfg() const {
    return DeformableNetConfig{levels, base_channels, channel_mult};
  }
  AffineNetConfig affine_cfg() const {
    return AffineNetConfig{levels, base_channels, channel_mult};
  }
  LossWeights loss_weights() const {
    return LossWeights{lambda_tv, lambda_ortho, lambda_det};
  }
};

/// Piecewise-constant rate: halved at the two proportional breakpoints.
inline double lr_schedule(std::int64_t step, const TrainConfig& cfg) {
  std::int64_t t1 = std::llround(cfg.half_at_frac1 * double(cfg.total_steps));
  std::int64_t t2 = std::llround(cfg.half_at_frac2 * double(cfg.total_steps));
  if (step >= t2) return cfg.base_lr / 4;
  if (step >= t1) return cfg.base_lr / 2;
  return cfg.base_lr;
}

/// One optimizer step. A non-finite gradient aborts the step (parameters,
/// moments and t untouched) and returns false; three consecutive aborts are
/// a training error. Gradient arrays are zeroed after use.
inline bool adam_step(
    const std::vector<std::pair<std::string, ParamTensor<float>*>>& tensors,
    std::vector<ArrayX<float>>& grads, AdamState& st, double lr) {
  if (tensors.size() != grads.size() || tensors.size() != st.m.size())
    throw ContractError("adam_step: state/gradient misalignment");
  bool finite = true;
  for (const auto& g : grads) finite = finite && g.allFinite();
  if (!finite) {
    if (++st.skip_streak >= 3)
      throw TrainingError("adam_step: 3 consecutive non-finite gradients");
    for (auto& g : grads) g.setZero();
    return false;
  }
  st.skip_streak = 0;
  st.t += 1;
  const float b1 = float(AdamState::kBeta1), b2 = float(AdamState::kBeta2);
  const float inv_bc1 = float(1.0 / (1.0 - std::pow(AdamState::kBeta1, double(st.t))));
  const float inv_bc2 = float(1.0 / (1.0 - std::pow(AdamState::kBeta2, double(st.t))));
  const float flr = float(lr), eps = float(AdamState::kEps);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    ArrayX<float>& g = grads[i];
    st.m[i] = b1 * st.m[i] + (1 - b1) * g;
    st.v[i] = b2 * st.v[i] + (1 - b2) * g.square();
    tensors[i].second->value -=
        flr * (st.m[i] * inv_bc1) / ((st.v[i] * inv_bc2).sqrt() + eps);
    g.setZero();
  }
  return true;
}

struct StepLog {
  std::int64_t step = 0;
  double lr = 0;
  double loss = 0, sim = 0, tv2 = 0, ortho = 0, det = 0;
  bool skipped = false;
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(std::int64_t completed_steps)> on_checkpoint;
};

namespace train_detail {

constexpr std::uint64_t kDataTag = 500;
constexpr std::uint64_t kDifficultyTag = 501;

inline std::pair<int, int> tape_inputs(Tape<float>& tape,
                                       const SyntheticSample& s) {
  Volume mn = normalize_unit(s.moving), fn = normalize_unit(s.fixed);
  Shape vs = Shape::tensor4(1, s.fixed.dims.d, s.fixed.dims.h, s.fixed.dims.w);
  return {tape.input(vs, mn.voxels), tape.input(vs, fn.voxels)};
}

}  // namespace train_detail

/// Joint training loop over steps [start_step, total_steps). Pairs come
/// from a counter-derived seed stream (or cycle a fixed dataset directory),
/// so a resumed run consumes exactly the data the uninterrupted run would.
inline void train(CascadeModel& model, AdamState& state,
                  const TrainConfig& cfg, const TrainHooks& hooks = {},
                  std::int64_t start_step = 0) {
  cfg.validate();
  Dims3 dims = cube(cfg.dim);
  std::vector<LoadedSample> fixed_set;
  if (!cfg.data_dir.empty())
    for (const auto& d : list_sample_dirs(cfg.data_dir))
      fixed_set.push_back(load_sample(d));

  auto tensors = model_tensors(model);
  std::vector<ArrayX<float>> grads;
  for (auto& [name, t] : tensors) {
    (void)name;
    grads.push_back(ArrayX<float>::Zero(t->value.size()));
  }
  CascadeSchedule plain = expand_shared(model, 1, ExpandMode::kPlain);
  const float inv_batch = 1.0f / float(cfg.batch_size);

  for (std::int64_t step = start_step; step < cfg.total_steps; ++step) {
    double lr = lr_schedule(step, cfg);
    StepLog log;
    log.step = step;
    log.lr = lr;
    for (int b = 0; b < cfg.batch_size; ++b) {
      std::int64_t counter = step * cfg.batch_size + b;
      SyntheticSample sample;
      if (fixed_set.empty()) {
        std::uint64_t pair_seed = derive_seed(
            derive_seed(cfg.seed, train_detail::kDataTag), std::uint64_t(counter));
        // cfg.max_disp bounds the deformation; per-pair difficulty spans
        // (0, max_disp], cube-root-skewed toward the bound. Hard pairs must
        // dominate so stacked cascades split the work, but the easy tail is
        // load-bearing too: a cascade re-applied to its own output
        // (shared-weight expansion) sees nearly aligned inputs, and without
        // them in the training distribution it overshoots.
        double difficulty = std::cbrt(
            Rng(derive_seed(pair_seed, train_detail::kDifficultyTag)).uniform01());
        sample = generate_pair(pair_seed, dims, difficulty * cfg.max_disp,
                               cfg.affine_jitter);
      } else {
        sample = fixed_set[std::size_t(counter % std::int64_t(fixed_set.size()))]
                     .sample;
      }
      Tape<float> tape;
      BoundModel bound = bind_model(model, tape);
      auto [mid, fid] = train_detail::tape_inputs(tape, sample);
      CascadeOutputs out = forward(model, bound, plain, tape, mid, fid, true);
      LossTerms terms = total_loss(tape, out, fid, cfg.loss_weights());
      if (!similarity_gating_holds(tape, out))
        throw ContractError("train: similarity gating violated");
      tape.backward(terms.total);
      std::size_t i = 0;
      for (int id : bound.affine_ids) grads[i++] += inv_batch * tape.node(id).grad;
      for (const auto& ids : bound.cascade_ids)
        for (int id : ids) grads[i++] += inv_batch * tape.node(id).grad;
      log.loss += terms.total_v * inv_batch;
      log.sim += terms.sim_v * inv_batch;
      log.tv2 += terms.tv2_v * inv_batch;
      log.ortho += terms.ortho_v * inv_batch;
      log.det += terms.det_v * inv_batch;
    }
    log.skipped = !adam_step(tensors, grads, state, lr);
    if (hooks.on_step) hooks.on_step(log);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 &&
        (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.total_steps)
      hooks.on_checkpoint(step + 1);
  }
}

}  // namespace casreg
