#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvvd/rng.hpp"
#include "mvvd/schedule.hpp"
#include "mvvd/tape.hpp"

namespace mvvd {

// One training batch for the denoiser: clean latents, per-batch-element
// timesteps, the injected noise, and whatever conditioning the model takes.
template <typename S, typename Cond>
struct DiffusionBatch {
  AxisTensor<S> z0;        // (b, ...) normalized to [-1, 1]
  std::vector<int64_t> t;  // one timestep per leading-axis element
  AxisTensor<S> epsilon;   // same shape as z0
  Cond condition;
};

// Forward noising at a single timestep:
// z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * epsilon.
template <typename S>
AxisTensor<S> q_sample(const AxisTensor<S>& z0, int64_t t, const AxisTensor<S>& eps,
                       const NoiseSchedule& sched) {
  check_same_axes(z0, eps, "q_sample");
  if (t < 0 || t >= sched.T)
    throw std::invalid_argument("q_sample: timestep " + std::to_string(t) +
                                " out of range [0, " + std::to_string(sched.T) + ")");
  const S sa = S(std::sqrt(sched.alpha_bars[t]));
  const S sb = S(std::sqrt(1.0 - sched.alpha_bars[t]));
  std::vector<S> out(z0.numel());
  const S* pz = z0.raw();
  const S* pe = eps.raw();
  parallel_chunks(z0.numel(), 1 << 16, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) out[i] = sa * pz[i] + sb * pe[i];
  });
  return AxisTensor<S>(z0.axes(), std::move(out));
}

// Forward noising with one timestep per leading-axis element.
template <typename S>
AxisTensor<S> q_sample_batch(const AxisTensor<S>& z0, const std::vector<int64_t>& ts,
                             const AxisTensor<S>& eps, const NoiseSchedule& sched) {
  check_same_axes(z0, eps, "q_sample");
  if (z0.rank() < 1 || z0.axis(0).size != static_cast<int64_t>(ts.size()))
    throw std::invalid_argument("q_sample: got " + std::to_string(ts.size()) +
                                " timesteps for leading axis " + z0.shape_string());
  const int64_t b = z0.axis(0).size;
  const int64_t row = z0.numel() / b;
  std::vector<S> out(z0.numel());
  const S* pz = z0.raw();
  const S* pe = eps.raw();
  for (int64_t i = 0; i < b; ++i) {
    const int64_t t = ts[i];
    if (t < 0 || t >= sched.T)
      throw std::invalid_argument("q_sample: timestep " + std::to_string(t) +
                                  " out of range [0, " + std::to_string(sched.T) + ")");
    const S sa = S(std::sqrt(sched.alpha_bars[t]));
    const S sb = S(std::sqrt(1.0 - sched.alpha_bars[t]));
    parallel_chunks(row, 1 << 16, [&](int64_t lo, int64_t hi) {
      for (int64_t j = lo; j < hi; ++j)
        out[i * row + j] = sa * pz[i * row + j] + sb * pe[i * row + j];
    });
  }
  return AxisTensor<S>(z0.axes(), std::move(out));
}

// Noise-prediction objective: || eps - eps_model(q_sample(z0, t, eps)) ||^2,
// averaged over every element. eps_model is called with (tape, z_t, t per
// batch element) and must return a tape var shaped like z0; conditioning is
// the caller's business (bind it into the closure).
template <typename S, typename Fn>
TapeVar training_loss(Tape<S>& tape, Fn&& eps_model, const AxisTensor<S>& z0,
                      const std::vector<int64_t>& ts, const AxisTensor<S>& eps,
                      const NoiseSchedule& sched) {
  AxisTensor<S> zt = q_sample_batch(z0, ts, eps, sched);
  TapeVar pred = eps_model(tape, zt, ts);
  if (!tape.value(pred).same_axes(z0))
    throw std::invalid_argument("training_loss: model output " +
                                tape.value(pred).shape_string() +
                                " differs from input " + z0.shape_string());
  return mse(tape, pred, tape.constant(eps));
}

// Ancestral sampler. eps_model(z, t, null_cond) returns the predicted noise
// for the bound condition, or for the null condition when null_cond is set.
// Guidance blends eps_hat = eps_null + s * (eps_cond - eps_null); at exactly
// s = 1 the null branch is skipped so the trajectory is bit-identical to
// plain conditional sampling. Update noise is sigma_t = sqrt(beta_t), and the
// final step adds none.
template <typename S, typename Fn>
AxisTensor<S> ddpm_sample(Fn&& eps_model, const NoiseSchedule& sched,
                          const std::vector<Axis>& shape, double guidance_scale,
                          Rng& rng) {
  if (guidance_scale < 0)
    throw std::invalid_argument("ddpm_sample: guidance_scale must be >= 0");
  std::vector<S> buf(AxisTensor<S>(shape).numel());
  rng.fill_normal(std::span<S>(buf));
  AxisTensor<S> z(shape, std::move(buf));

  for (int t = sched.T - 1; t >= 0; --t) {
    AxisTensor<S> eps_hat = eps_model(z, t, false);
    check_same_axes(z, eps_hat, "ddpm_sample");
    if (guidance_scale != 1.0) {
      const AxisTensor<S> eps_null = eps_model(z, t, true);
      const S s = S(guidance_scale);
      std::vector<S> mixed(z.numel());
      const S* pc = eps_hat.raw();
      const S* pn = eps_null.raw();
      parallel_chunks(z.numel(), 1 << 16, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) mixed[i] = pn[i] + s * (pc[i] - pn[i]);
      });
      eps_hat = AxisTensor<S>(shape, std::move(mixed));
    }

    const S c1 = S(1.0 / std::sqrt(sched.alphas[t]));
    const S c2 = S(sched.betas[t] / std::sqrt(1.0 - sched.alpha_bars[t]));
    const S sigma = S(std::sqrt(sched.betas[t]));
    std::vector<S> next(z.numel());
    const S* pz = z.raw();
    const S* pe = eps_hat.raw();
    parallel_chunks(z.numel(), 1 << 16, [&](int64_t lo, int64_t hi) {
      for (int64_t i = lo; i < hi; ++i) next[i] = c1 * (pz[i] - c2 * pe[i]);
    });
    if (t > 0) {
      // Fresh noise drawn serially so the stream layout is fixed.
      for (auto& x : next) x += sigma * S(rng.normal());
    }
    z = AxisTensor<S>(shape, std::move(next));
    if (!all_finite(z))
      throw std::runtime_error("ddpm_sample: non-finite state at t=" +
                               std::to_string(t));
  }
  return z;
}

}  // namespace mvvd
