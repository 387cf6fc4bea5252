#include "charpipe/diffusion.hpp"

#include <cmath>

namespace charpipe {

NoiseSchedule build_schedule(int T, real beta_start, real beta_end) {
    check(T >= 1, "build_schedule: T must be >= 1");
    check(beta_start > 0.0, "build_schedule: beta_start must be positive");
    check(beta_start <= beta_end, "build_schedule: beta_start must be <= beta_end");
    check(beta_end < 1.0, "build_schedule: beta_end must be < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.resize(T);
    s.alpha_bar.resize(T);
    real prod = 1.0;
    for (int t = 0; t < T; ++t) {
        real frac = T == 1 ? 0.0 : static_cast<real>(t) / static_cast<real>(T - 1);
        s.beta[t] = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - s.beta[t];
        s.alpha_bar[t] = prod;
    }
    return s;
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    check_same_shape(z0, eps, "forward_diffuse");
    check(t >= 0 && t < sched.T, "forward_diffuse: t out of range");
    real ab = sched.alpha_bar[t];
    real a = std::sqrt(ab);
    real b = std::sqrt(1.0 - ab);
    return add(scale(z0, a), scale(eps, b));
}

Tensor forward_diffuse_batch(const Tensor& z0, const std::vector<int>& ts, const Tensor& eps,
                             const NoiseSchedule& sched) {
    check_same_shape(z0, eps, "forward_diffuse_batch");
    check(z0.ndim() >= 1, "forward_diffuse_batch: need a batch dim");
    int N = z0.dim(0);
    check(static_cast<int>(ts.size()) == N, "forward_diffuse_batch: one timestep per sample");
    size_t per = z0.numel() / static_cast<size_t>(N);
    std::vector<real> out(z0.numel());
    std::vector<real> as(N), bs(N);
    for (int n = 0; n < N; ++n) {
        check(ts[n] >= 0 && ts[n] < sched.T, "forward_diffuse_batch: t out of range");
        real ab = sched.alpha_bar[ts[n]];
        as[n] = std::sqrt(ab);
        bs[n] = std::sqrt(1.0 - ab);
        for (size_t i = 0; i < per; ++i) {
            size_t idx = static_cast<size_t>(n) * per + i;
            out[idx] = as[n] * z0.val()[idx] + bs[n] * eps.val()[idx];
        }
    }
    return make_op(z0.shape(), std::move(out), {z0, eps},
                   [N, per, as, bs](TensorNode& nd) {
                       TensorNode& pz = *nd.parents[0];
                       TensorNode& pe = *nd.parents[1];
                       if (pz.requires_grad) pz.ensure_grad();
                       if (pe.requires_grad) pe.ensure_grad();
                       for (int n = 0; n < N; ++n)
                           for (size_t i = 0; i < per; ++i) {
                               size_t idx = static_cast<size_t>(n) * per + i;
                               if (pz.requires_grad) pz.grad[idx] += nd.grad[idx] * as[n];
                               if (pe.requires_grad) pe.grad[idx] += nd.grad[idx] * bs[n];
                           }
                   });
}

std::vector<int> ddim_timesteps(int steps, int T) {
    check(steps >= 1, "ddim_timesteps: steps must be >= 1");
    check(steps <= T, "ddim_timesteps: steps must be <= T");
    std::vector<int> ts(steps);
    for (int i = 0; i < steps; ++i) {
        ts[i] = static_cast<int>((static_cast<int64_t>(i + 1) * T) / steps) - 1;
    }
    return ts;
}

Tensor ddim_sample(const DenoiserFn& denoiser, const NoiseSchedule& sched, int steps,
                   const std::vector<int>& shape, uint64_t seed) {
    NoGradGuard ng;
    std::vector<int> ts = ddim_timesteps(steps, sched.T);

    Rng rng = Rng(seed).fork("ddim:init");
    Tensor z = Tensor::zeros(shape);
    for (real& v : z.val()) v = rng.normal();

    Tensor x0;
    for (int i = steps - 1; i >= 0; --i) {
        int t = ts[i];
        real ab_t = sched.alpha_bar[t];
        real ab_prev = i > 0 ? sched.alpha_bar[ts[i - 1]] : 1.0;
        Tensor eps_hat = denoiser(z, t);
        check_same_shape(z, eps_hat, "ddim_sample: denoiser output");
        // x0 estimate, then the eta=0 step toward ab_prev.
        real inv_sa = 1.0 / std::sqrt(ab_t);
        real sb = std::sqrt(1.0 - ab_t);
        x0 = scale(add(z, scale(eps_hat, -sb)), inv_sa);
        z = add(scale(x0, std::sqrt(ab_prev)), scale(eps_hat, std::sqrt(1.0 - ab_prev)));
    }
    // Final z equals the last x0 estimate (ab_prev hits 1). Clip and map to [0, 1].
    std::vector<real> out(z.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        real v = z.val()[i];
        if (v < -1.0) v = -1.0;
        if (v > 1.0) v = 1.0;
        out[i] = (v + 1.0) * 0.5;
    }
    return Tensor::from_data(z.shape(), std::move(out));
}

} // namespace charpipe
