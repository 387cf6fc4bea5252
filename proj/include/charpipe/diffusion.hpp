#pragma once

#include <functional>

#include "charpipe/rng.hpp"
#include "charpipe/tensor.hpp"

namespace charpipe {

// Linear-beta noise schedule with precomputed cumulative alpha products.
struct NoiseSchedule {
    int T = 0;
    real beta_start = 0.0;
    real beta_end = 0.0;
    std::vector<real> beta;      // [T]
    std::vector<real> alpha_bar; // [T], strictly decreasing in (0, 1)
};

// T >= 1, 0 < beta_start <= beta_end < 1. Betas interpolate linearly from
// beta_start at t=0 to beta_end at t=T-1.
NoiseSchedule build_schedule(int T, real beta_start, real beta_end);

// sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps, one t for the batch.
Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);
// Per-sample timesteps for a [N, ...] batch.
Tensor forward_diffuse_batch(const Tensor& z0, const std::vector<int>& ts, const Tensor& eps,
                             const NoiseSchedule& sched);

// Noise predictor closure: maps (z_t, t) to predicted noise of the same shape.
// Conditioning is baked into the closure.
using DenoiserFn = std::function<Tensor(const Tensor& z_t, int t)>;

// The timestep subsequence DDIM visits for `steps` out of T, ascending.
// steps == T yields 0..T-1.
std::vector<int> ddim_timesteps(int steps, int T);

// Deterministic DDIM (eta = 0) from pure noise seeded by `seed`. The result
// is the final x0 estimate clipped to [-1, 1] and mapped to [0, 1].
Tensor ddim_sample(const DenoiserFn& denoiser, const NoiseSchedule& sched, int steps,
                   const std::vector<int>& shape, uint64_t seed);

} // namespace charpipe
