#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "charpipe/diffusion.hpp"
#include "charpipe/unet.hpp"
#include "micro_net.hpp"

using namespace charpipe;

TEST_CASE("schedule with a single step") {
    NoiseSchedule s = build_schedule(1, 0.5, 0.5);
    REQUIRE(s.alpha_bar.size() == 1);
    CHECK(s.alpha_bar[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("linear schedule matches an independent cumulative product") {
    NoiseSchedule s = build_schedule(200, 1e-4, 0.02);
    REQUIRE(s.beta.size() == 200);
    CHECK(s.beta[0] == doctest::Approx(1e-4).epsilon(1e-15));
    CHECK(s.beta[199] == doctest::Approx(0.02).epsilon(1e-15));
    for (int t = 1; t < 200; ++t) {
        CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        CHECK(s.alpha_bar[t] > 0.0);
    }
    // Oracle: direct product loop, written independently of the builder.
    double prod = 1.0;
    for (int t = 0; t < 200; ++t) {
        double beta = 1e-4 + (0.02 - 1e-4) * (static_cast<double>(t) / 199.0);
        prod *= 1.0 - beta;
    }
    CHECK(std::abs(s.alpha_bar[199] - prod) < 1e-12);
}

TEST_CASE("schedule construction rejects bad arguments") {
    CHECK_THROWS_AS(build_schedule(0, 1e-4, 0.02), ValidationError);
    CHECK_THROWS_AS(build_schedule(10, 0.0, 0.02), ValidationError);
    CHECK_THROWS_AS(build_schedule(10, 0.05, 0.02), ValidationError);
    CHECK_THROWS_AS(build_schedule(10, 1e-4, 1.0), ValidationError);
}

TEST_CASE("forward diffusion hits its closed-form limits") {
    Tensor z0 = Tensor::full({2, 3, 4, 4}, 0.5);
    Tensor eps = Tensor::full({2, 3, 4, 4}, -1.25);

    NoiseSchedule synthetic;
    synthetic.T = 3;
    synthetic.alpha_bar = {1.0, 0.25, 0.0};

    Tensor a = forward_diffuse(z0, 0, eps, synthetic);
    CHECK(a.val() == z0.val()); // alpha_bar = 1 passes z0 through exactly

    Tensor b = forward_diffuse(z0, 2, eps, synthetic);
    CHECK(b.val() == eps.val()); // alpha_bar = 0 is pure noise

    Tensor c = forward_diffuse(z0, 1, eps, synthetic);
    for (real v : c.val()) {
        CHECK(v == doctest::Approx(0.5 * 0.5 + std::sqrt(0.75) * -1.25).epsilon(1e-14));
    }

    CHECK_THROWS_AS(forward_diffuse(z0, 3, eps, synthetic), ValidationError);
    CHECK_THROWS_AS(forward_diffuse(z0, -1, eps, synthetic), ValidationError);
    CHECK_THROWS_AS(forward_diffuse(z0, 0, Tensor::zeros({2, 3, 4, 5}), synthetic),
                    ValidationError);
}

TEST_CASE("forward diffusion variance tracks 1 - alpha_bar") {
    NoiseSchedule s = build_schedule(200, 1e-4, 0.02);
    int t = 120;
    Tensor z0 = Tensor::full({1, 1, 1, 1}, 0.37);
    Rng rng = Rng(2026).fork("variance");
    const int n = 10000;
    double mean = 0.0, m2 = 0.0;
    std::vector<double> draws(n);
    for (int i = 0; i < n; ++i) {
        Tensor eps = Tensor::from_data({1, 1, 1, 1}, {rng.normal()});
        draws[i] = forward_diffuse(z0, t, eps, s).val()[0];
        mean += draws[i];
    }
    mean /= n;
    for (double d : draws) m2 += (d - mean) * (d - mean);
    double var = m2 / (n - 1);
    double expected = 1.0 - s.alpha_bar[t];
    CHECK(std::abs(var - expected) / expected < 0.05);
    CHECK(std::abs(mean - std::sqrt(s.alpha_bar[t]) * 0.37) < 0.02);
}

TEST_CASE("per-sample timesteps agree with the single-timestep path") {
    NoiseSchedule s = build_schedule(50, 1e-3, 0.05);
    Rng r = Rng(4).fork("batch");
    Tensor z0 = Tensor::randn({3, 2, 4, 4}, r);
    Tensor eps = Tensor::randn({3, 2, 4, 4}, r);
    Tensor batched = forward_diffuse_batch(z0, {5, 20, 49}, eps, s);
    for (int n = 0; n < 3; ++n) {
        Tensor zn = Tensor::from_data({1, 2, 4, 4},
                                      std::vector<real>(z0.val().begin() + n * 32,
                                                        z0.val().begin() + (n + 1) * 32));
        Tensor en = Tensor::from_data({1, 2, 4, 4},
                                      std::vector<real>(eps.val().begin() + n * 32,
                                                        eps.val().begin() + (n + 1) * 32));
        Tensor single = forward_diffuse(zn, n == 0 ? 5 : (n == 1 ? 20 : 49), en, s);
        for (int i = 0; i < 32; ++i) {
            CHECK(batched.val()[n * 32 + i] == single.val()[i]);
        }
    }
    CHECK_THROWS_AS(forward_diffuse_batch(z0, {5, 20}, eps, s), ValidationError);
}

TEST_CASE("mse loss known values") {
    Tensor a = Tensor::full({2, 8}, 1.5);
    Tensor b = Tensor::full({2, 8}, -0.5);
    CHECK(mse(a, a).item() == 0.0);
    CHECK(mse(a, b).item() == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("ddim timestep subsequence is evenly spaced and ends at T-1") {
    std::vector<int> ts = ddim_timesteps(20, 200);
    REQUIRE(ts.size() == 20);
    CHECK(ts.front() == 9);
    CHECK(ts.back() == 199);
    for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] - ts[i - 1] == 10);

    std::vector<int> full = ddim_timesteps(7, 7);
    for (int i = 0; i < 7; ++i) CHECK(full[i] == i);

    CHECK_THROWS_AS(ddim_timesteps(21, 20), ValidationError);
    CHECK_THROWS_AS(ddim_timesteps(0, 20), ValidationError);
}

TEST_CASE("ddim sampling is deterministic and seed-sensitive") {
    NoiseSchedule s = build_schedule(40, 1e-3, 0.04);
    // Arbitrary fixed denoiser: a smooth function of z and t.
    DenoiserFn den = [](const Tensor& z, int t) {
        Tensor out = Tensor::zeros(z.shape());
        for (size_t i = 0; i < z.numel(); ++i) {
            out.val()[i] = 0.3 * std::tanh(z.val()[i]) + 0.001 * t;
        }
        return out;
    };
    Tensor a = ddim_sample(den, s, 10, {1, 3, 4, 4}, 77);
    Tensor b = ddim_sample(den, s, 10, {1, 3, 4, 4}, 77);
    Tensor c = ddim_sample(den, s, 10, {1, 3, 4, 4}, 78);
    CHECK(a.val() == b.val()); // bitwise
    CHECK(a.val() != c.val());
    for (real v : a.val()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("ddim with an exact-noise oracle recovers the clean signal") {
    NoiseSchedule s = build_schedule(50, 1e-3, 0.03);
    Rng r = Rng(9).fork("oracle");
    Tensor z0 = Tensor::zeros({1, 3, 4, 4});
    for (real& v : z0.val()) v = r.uniform(-0.9, 0.9);

    // Knows the true z0, so it can report the exact noise in z_t.
    DenoiserFn oracle = [&](const Tensor& z, int t) {
        real ab = s.alpha_bar[t];
        Tensor out = Tensor::zeros(z.shape());
        for (size_t i = 0; i < z.numel(); ++i) {
            out.val()[i] = (z.val()[i] - std::sqrt(ab) * z0.val()[i]) / std::sqrt(1.0 - ab);
        }
        return out;
    };
    Tensor rec = ddim_sample(oracle, s, 50, {1, 3, 4, 4}, 5);
    double worst = 0.0;
    for (size_t i = 0; i < rec.numel(); ++i) {
        double expected = (z0.val()[i] + 1.0) * 0.5; // sampler maps to [0, 1]
        worst = std::max(worst, std::abs(rec.val()[i] - expected));
    }
    CHECK_LT(worst, 1e-4);
}

TEST_CASE("micro denoiser loss gradients match central differences") {
    UNetConfig cfg = charpipe::testutil::micro_unet_config();
    ParamStore ps(314);
    UNet unet(cfg, ps, "net.");
    ps.set_trainable_all(true);

    NoiseSchedule s = build_schedule(30, 1e-3, 0.02);
    Rng r = Rng(41).fork("fd");
    Tensor z0 = Tensor::randn({1, 3, 8, 8}, r, 0.5);
    Tensor eps = Tensor::randn({1, 3, 8, 8}, r);
    Tensor z_t = forward_diffuse(z0, 17, eps, s).detach();

    auto loss_fn = [&] {
        UNetRunCtx ctx;
        Tensor pred = unet.forward(z_t, {17}, ctx);
        return mse(pred, eps);
    };
    double worst = charpipe::testutil::loss_grad_fd_error(ps, loss_fn, 24, 10007, 1e-4);
    CHECK_LT(worst, 1e-3);
}
