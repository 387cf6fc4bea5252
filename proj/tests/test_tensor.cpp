#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "charpipe/nn.hpp"
#include "charpipe/tensor.hpp"
#include "test_util.hpp"

using namespace charpipe;
using charpipe::testutil::grad_check;

namespace {

Rng test_rng(const char* tag) { return Rng(20260819).fork(tag); }

} // namespace

TEST_CASE("elementwise ops match finite differences") {
    Rng r = test_rng("elementwise");
    Tensor a = Tensor::randn({3, 4}, r);
    Tensor b = Tensor::randn({3, 4}, r);
    Tensor tgt = Tensor::randn({3, 4}, r);

    CHECK_LT(grad_check({a, b}, [&] { return mse(add(a, b), tgt); }), 1e-7);
    CHECK_LT(grad_check({a, b}, [&] { return mse(sub(a, b), tgt); }), 1e-7);
    CHECK_LT(grad_check({a, b}, [&] { return mse(mul(a, b), tgt); }), 1e-7);
    CHECK_LT(grad_check({a}, [&] { return mse(scale(a, -1.7), tgt); }), 1e-7);
    CHECK_LT(grad_check({a}, [&] { return mse(add_scalar(a, 0.3), tgt); }), 1e-7);
    CHECK_LT(grad_check({a}, [&] { return mse(silu(a), tgt); }), 1e-7);
    CHECK_LT(grad_check({a}, [&] { return mse(sigmoid(a), tgt); }), 1e-7);
    CHECK_LT(grad_check({a}, [&] { return mean_all(mul(a, a)); }), 1e-7);
    CHECK_LT(grad_check({a}, [&] { return scale(sum_all(silu(a)), 0.1); }), 1e-7);
}

TEST_CASE("elementwise ops validate shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 2});
    CHECK_THROWS_AS(add(a, b), ValidationError);
    CHECK_THROWS_AS(mul(a, b), ValidationError);
    CHECK_THROWS_AS(mse(a, b), ValidationError);
}

TEST_CASE("matmul family matches finite differences") {
    Rng r = test_rng("matmul");
    Tensor a = Tensor::randn({3, 5}, r);
    Tensor b = Tensor::randn({5, 4}, r);
    Tensor bt = Tensor::randn({4, 5}, r);
    Tensor tgt = Tensor::randn({3, 4}, r);

    CHECK_LT(grad_check({a, b}, [&] { return mse(matmul(a, b), tgt); }), 1e-7);
    CHECK_LT(grad_check({a, bt}, [&] { return mse(matmul_nt(a, bt), tgt); }), 1e-7);

    Tensor x = Tensor::randn({4, 6}, r);
    Tensor w = Tensor::randn({3, 6}, r);
    Tensor bias = Tensor::randn({3}, r);
    Tensor tgt2 = Tensor::randn({4, 3}, r);
    CHECK_LT(grad_check({x, w, bias}, [&] { return mse(linear(x, w, bias), tgt2); }), 1e-7);
    CHECK_LT(grad_check({x, w}, [&] { return mse(linear(x, w, Tensor()), tgt2); }), 1e-7);

    CHECK_THROWS_AS(matmul(a, bt), ValidationError);
    CHECK_THROWS_AS(linear(x, Tensor::zeros({3, 5}), Tensor()), ValidationError);
}

TEST_CASE("batched matmul matches finite differences") {
    Rng r = test_rng("bmm");
    Tensor q = Tensor::randn({2, 3, 4}, r);
    Tensor k = Tensor::randn({2, 5, 4}, r);
    Tensor v = Tensor::randn({2, 5, 4}, r);
    Tensor tgt = Tensor::randn({2, 3, 4}, r);
    auto attn_like = [&] {
        Tensor scores = bmm_nt(q, k); // [2,3,5]
        int N = 2, T = 3, S = 5;
        Tensor att = reshape(softmax_rows(reshape(scores, {N * T, S})), {N, T, S});
        return mse(bmm_nn(att, v), tgt);
    };
    CHECK_LT(grad_check({q, k, v}, attn_like), 1e-7);
    CHECK_THROWS_AS(bmm_nt(q, Tensor::zeros({2, 5, 3})), ValidationError);
    CHECK_THROWS_AS(bmm_nn(q, Tensor::zeros({2, 5, 4})), ValidationError);
}

TEST_CASE("conv2d matches finite differences") {
    Rng r = test_rng("conv");
    Tensor x = Tensor::randn({2, 3, 5, 4}, r);

    SUBCASE("3x3 stride 1 pad 1") {
        Tensor w = Tensor::randn({4, 3, 3, 3}, r, 0.4);
        Tensor b = Tensor::randn({4}, r);
        Tensor tgt = Tensor::randn({2, 4, 5, 4}, r);
        CHECK_LT(grad_check({x, w, b}, [&] { return mse(conv2d(x, w, b, 1, 1), tgt); }), 1e-6);
    }
    SUBCASE("3x3 stride 2 pad 1") {
        Tensor w = Tensor::randn({2, 3, 3, 3}, r, 0.4);
        Tensor b = Tensor::randn({2}, r);
        Tensor out = conv2d(x, w, b, 2, 1);
        CHECK(out.shape() == std::vector<int>{2, 2, 3, 2});
        Tensor tgt = Tensor::randn(out.shape(), r);
        CHECK_LT(grad_check({x, w, b}, [&] { return mse(conv2d(x, w, b, 2, 1), tgt); }), 1e-6);
    }
    SUBCASE("1x1 stride 1 pad 0, no bias") {
        Tensor w = Tensor::randn({6, 3, 1, 1}, r, 0.4);
        Tensor tgt = Tensor::randn({2, 6, 5, 4}, r);
        CHECK_LT(grad_check({x, w}, [&] { return mse(conv2d(x, w, Tensor(), 1, 0), tgt); }),
                 1e-6);
    }
    SUBCASE("shape validation") {
        Tensor w = Tensor::randn({4, 5, 3, 3}, r);
        CHECK_THROWS_AS(conv2d(x, w, Tensor(), 1, 1), ValidationError);
        Tensor w2 = Tensor::randn({4, 3, 9, 9}, r);
        CHECK_THROWS_AS(conv2d(x, w2, Tensor(), 1, 1), ValidationError);
    }
}

TEST_CASE("group_norm matches finite differences and normalizes") {
    Rng r = test_rng("gn");
    Tensor x = Tensor::randn({2, 6, 3, 2}, r, 2.0);
    Tensor gamma = Tensor::randn({6}, r, 0.5);
    Tensor beta = Tensor::randn({6}, r, 0.5);
    Tensor tgt = Tensor::randn({2, 6, 3, 2}, r);
    for (int groups : {1, 2, 3, 6}) {
        // Finite differences on the normalization statistics carry a little
        // extra roundoff; any actual gradient bug lands orders of magnitude
        // above this bound.
        CHECK_LT(grad_check({x, gamma, beta},
                            [&] { return mse(group_norm(x, groups, gamma, beta), tgt); }),
                 2e-5);
    }
    // Unit gamma and zero beta: per-group mean ~0, var ~1.
    Tensor ones = Tensor::full({6}, 1.0);
    Tensor zeros = Tensor::zeros({6});
    Tensor y = group_norm(x, 2, ones, zeros);
    double mean = 0.0;
    size_t gsize = 3 * 3 * 2;
    for (size_t i = 0; i < gsize; ++i) mean += y.val()[i];
    mean /= gsize;
    CHECK_LT(std::abs(mean), 1e-10);
    CHECK_THROWS_AS(group_norm(x, 4, ones, zeros), ValidationError);
    CHECK_THROWS_AS(group_norm(x, 2, Tensor::zeros({5}), zeros), ValidationError);
}

TEST_CASE("shape ops match finite differences") {
    Rng r = test_rng("shape");
    Tensor x = Tensor::randn({2, 3, 4, 2}, r);

    Tensor tgt_tok = Tensor::randn({2, 8, 3}, r);
    CHECK_LT(grad_check({x}, [&] { return mse(nchw_to_tokens(x), tgt_tok); }), 1e-7);

    Tensor tok = Tensor::randn({2, 8, 3}, r);
    Tensor tgt_img = Tensor::randn({2, 3, 4, 2}, r);
    CHECK_LT(grad_check({tok}, [&] { return mse(tokens_to_nchw(tok, 4, 2), tgt_img); }), 1e-6);

    Tensor a = Tensor::randn({2, 3, 4}, r);
    Tensor b = Tensor::randn({2, 2, 4}, r);
    Tensor tgt_cat = Tensor::randn({2, 5, 4}, r);
    CHECK_LT(grad_check({a, b}, [&] { return mse(concat_tokens(a, b), tgt_cat); }), 1e-7);
    Tensor tgt_slice = Tensor::randn({2, 2, 4}, r);
    CHECK_LT(grad_check({a}, [&] { return mse(slice_tokens(a, 1, 3), tgt_slice); }), 1e-7);

    Tensor c1 = Tensor::randn({2, 2, 3, 2}, r);
    Tensor c2 = Tensor::randn({2, 3, 3, 2}, r);
    Tensor tgt_cc = Tensor::randn({2, 5, 3, 2}, r);
    CHECK_LT(grad_check({c1, c2}, [&] { return mse(concat_channels(c1, c2), tgt_cc); }), 1e-7);

    Tensor h1 = Tensor::randn({2, 3, 2, 2}, r);
    Tensor h2 = Tensor::randn({2, 3, 2, 2}, r);
    Tensor tgt_ch = Tensor::randn({2, 3, 4, 2}, r);
    CHECK_LT(grad_check({h1, h2}, [&] { return mse(concat_height(h1, h2), tgt_ch); }), 1e-7);

    CHECK_THROWS_AS(reshape(x, {5, 5}), ValidationError);
    CHECK_THROWS_AS(slice_tokens(a, 2, 2), ValidationError);
    CHECK_THROWS_AS(concat_height(h1, Tensor::zeros({2, 3, 2, 3})), ValidationError);
}

TEST_CASE("resampling ops match finite differences") {
    Rng r = test_rng("resample");
    Tensor x = Tensor::randn({2, 3, 4, 3}, r);

    Tensor tgt_up = Tensor::randn({2, 3, 8, 6}, r);
    CHECK_LT(grad_check({x}, [&] { return mse(upsample_nearest2x(x), tgt_up); }), 1e-7);

    Tensor tgt_bl = Tensor::randn({2, 3, 6, 5}, r);
    CHECK_LT(grad_check({x}, [&] { return mse(bilinear_resize(x, 6, 5), tgt_bl); }), 1e-7);
    Tensor tgt_bl2 = Tensor::randn({2, 3, 2, 2}, r);
    CHECK_LT(grad_check({x}, [&] { return mse(bilinear_resize(x, 2, 2), tgt_bl2); }), 1e-7);

    Tensor tgt_ap = Tensor::randn({2, 3, 2, 2}, r);
    CHECK_LT(grad_check({x}, [&] { return mse(adaptive_avg_pool(x, 2, 2), tgt_ap); }), 1e-7);
    Tensor tgt_ap1 = Tensor::randn({2, 3, 1, 1}, r);
    CHECK_LT(grad_check({x}, [&] { return mse(adaptive_avg_pool(x, 1, 1), tgt_ap1); }), 1e-7);
    CHECK_THROWS_AS(adaptive_avg_pool(x, 5, 2), ValidationError);
}

TEST_CASE("softmax, embedding, bias ops match finite differences") {
    Rng r = test_rng("misc");
    Tensor x = Tensor::randn({4, 5}, r);
    Tensor tgt = Tensor::randn({4, 5}, r);
    CHECK_LT(grad_check({x}, [&] { return mse(softmax_rows(x), tgt); }), 1e-7);

    Tensor table = Tensor::randn({7, 3}, r);
    std::vector<int> ids = {1, 5, 1, 0};
    Tensor tgt_e = Tensor::randn({4, 3}, r);
    CHECK_LT(grad_check({table}, [&] { return mse(embed_rows(table, ids), tgt_e); }), 1e-7);
    CHECK_THROWS_AS(embed_rows(table, {7}), ValidationError);

    Tensor img = Tensor::randn({2, 3, 2, 2}, r);
    Tensor rows = Tensor::randn({2, 3}, r);
    Tensor bias = Tensor::randn({3}, r);
    Tensor tgt_i = Tensor::randn({2, 3, 2, 2}, r);
    CHECK_LT(grad_check({img, rows}, [&] { return mse(add_channel_rows(img, rows), tgt_i); }),
             1e-7);
    CHECK_LT(grad_check({img, bias}, [&] { return mse(add_channel_bias(img, bias), tgt_i); }),
             1e-7);
}

TEST_CASE("mask_token_add matches finite differences") {
    Rng r = test_rng("mta");
    Tensor f = Tensor::randn({2, 3, 2, 2}, r);
    Tensor m = Tensor::zeros({2, 1, 2, 2});
    for (size_t i = 0; i < m.numel(); ++i) m.val()[i] = (i % 3 == 0) ? 1.0 : 0.25;
    Tensor vb = Tensor::randn({3}, r);
    Tensor vf = Tensor::randn({3}, r);
    Tensor tgt = Tensor::randn({2, 3, 2, 2}, r);
    CHECK_LT(grad_check({f, vb, vf}, [&] { return mse(mask_token_add(f, m, vb, vf), tgt); }),
             1e-7);
    CHECK_THROWS_AS(mask_token_add(f, Tensor::zeros({2, 3, 2, 2}), vb, vf), ValidationError);
    CHECK_THROWS_AS(mask_token_add(f, Tensor::zeros({2, 1, 3, 2}), vb, vf), ValidationError);
}

TEST_CASE("classification losses match finite differences") {
    Rng r = test_rng("loss");
    Tensor logits = Tensor::randn({5, 4}, r);
    std::vector<int> labels = {0, 3, 1, 1, 2};
    CHECK_LT(grad_check({logits}, [&] { return softmax_cross_entropy(logits, labels); }), 1e-7);
    CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, 1}), ValidationError);
    CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, 1, 2, 3, 4}), ValidationError);

    Tensor l = Tensor::randn({3, 4}, r, 2.0);
    Tensor t = Tensor::zeros({3, 4});
    for (size_t i = 0; i < t.numel(); ++i) t.val()[i] = (i % 2 == 0) ? 1.0 : 0.0;
    CHECK_LT(grad_check({l}, [&] { return bce_with_logits(l, t); }), 1e-7);

    // Known value: logits 0 against any target gives log(2).
    Tensor z = Tensor::zeros({2, 2});
    CHECK(bce_with_logits(z, Tensor::zeros({2, 2})).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("gradient flow respects requires_grad and NoGradGuard") {
    Rng r = test_rng("flow");
    Tensor a = Tensor::randn({2, 2}, r, 1.0, true);
    Tensor b = Tensor::randn({2, 2}, r); // frozen
    {
        GradTape tape;
        Tensor loss = mean_all(mul(a, b));
        tape.backward(loss);
    }
    CHECK(a.grad().size() == a.numel());
    CHECK(b.grad().size() == 0); // never touched
    double g = a.grad()[0];
    CHECK(g == doctest::Approx(b.val()[0] / 4.0));

    a.zero_grad();
    {
        NoGradGuard ng;
        GradTape tape;
        Tensor loss = mean_all(mul(a, b));
        CHECK_FALSE(loss.requires_grad());
    }

    // Ops outside any tape never record.
    Tensor c = mul(a, a);
    CHECK_FALSE(c.requires_grad());
}

TEST_CASE("gradients accumulate across reuse of a tensor") {
    Tensor a = Tensor::from_data({1}, {3.0}, true);
    a.zero_grad();
    {
        GradTape tape;
        Tensor y = mul(a, a); // dy/da = 2a = 6
        tape.backward(y);
    }
    CHECK(a.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("Adam minimizes a quadratic") {
    ParamStore ps(7);
    Tensor w = ps.create("w", {4}, Init::normal_small);
    for (size_t i = 0; i < w.numel(); ++i) w.val()[i] = 2.0 + static_cast<real>(i);
    Tensor target = Tensor::from_data({4}, {0.5, -1.0, 2.0, 0.0});
    Adam opt({.lr = 0.05});
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 400; ++step) {
        GradTape tape;
        Tensor loss = mse(w, target);
        if (step == 0) first = loss.item();
        last = loss.item();
        tape.backward(loss);
        opt.step(ps);
    }
    CHECK_LT(last, first * 1e-4);
}

TEST_CASE("ParamStore init is a pure function of seed and name") {
    ParamStore a(42), b(42), c(43);
    Tensor wa = a.create("m.conv.w", {4, 3, 3, 3}, Init::he_normal, 27);
    Tensor wb = b.create("m.conv.w", {4, 3, 3, 3}, Init::he_normal, 27);
    Tensor wc = c.create("m.conv.w", {4, 3, 3, 3}, Init::he_normal, 27);
    // Extra parameters in one store must not shift shared names.
    b.create("m.other.w", {8}, Init::normal_small);
    Tensor wb2 = b.create("m.conv.w", {4, 3, 3, 3}, Init::he_normal, 27);
    CHECK(wa.val() == wb.val());
    CHECK(wb.val() == wb2.val());
    CHECK(wa.val() != wc.val());

    CHECK(a.content_hash() != ParamStore(42).content_hash()); // empty store differs
    ParamStore a2(42);
    a2.create("m.conv.w", {4, 3, 3, 3}, Init::he_normal, 27);
    CHECK(a.content_hash() == a2.content_hash());
    a2.get("m.conv.w").val()[0] += 1e-9;
    CHECK(a.content_hash() != a2.content_hash());
}
