#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "charpipe/tensor.hpp"

namespace charpipe {

namespace {

struct BlasEnvInit {
    BlasEnvInit() {
        // One BLAS thread keeps summation order fixed no matter the host.
        setenv("OPENBLAS_NUM_THREADS", "1", 0);
    }
};
const BlasEnvInit g_blas_env_init;

// Row-major dgemm: C = alpha * op(A) * op(B) + beta * C.
void gemm(bool ta, bool tb, int m, int n, int k, real alpha, const real* a, const real* b,
          real beta, real* c) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, ta ? m : k, b, tb ? k : n, beta, c, n);
}

real sigmoid_scalar(real x) { return 1.0 / (1.0 + std::exp(-x)); }

void accumulate(TensorNode& p, const std::vector<real>& g) {
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
}

} // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] + b.val()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
        accumulate(*n.parents[0], n.grad);
        accumulate(*n.parents[1], n.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] - b.val()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
        accumulate(*n.parents[0], n.grad);
        TensorNode& pb = *n.parents[1];
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] * b.val()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
        TensorNode& pa = *n.parents[0];
        TensorNode& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.val[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.val[i];
        }
    });
}

Tensor scale(const Tensor& a, real c) {
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] * c;
    return make_op(a.shape(), std::move(out), {a}, [c](TensorNode& n) {
        TensorNode& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
    });
}

Tensor add_scalar(const Tensor& a, real c) {
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] + c;
    return make_op(a.shape(), std::move(out), {a},
                   [](TensorNode& n) { accumulate(*n.parents[0], n.grad); });
}

Tensor silu(const Tensor& a) {
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        real x = a.val()[i];
        out[i] = x * sigmoid_scalar(x);
    }
    return make_op(a.shape(), std::move(out), {a}, [](TensorNode& n) {
        TensorNode& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
            real x = p.val[i];
            real s = sigmoid_scalar(x);
            p.grad[i] += n.grad[i] * s * (1.0 + x * (1.0 - s));
        }
    });
}

Tensor sigmoid(const Tensor& a) {
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(a.val()[i]);
    return make_op(a.shape(), std::move(out), {a}, [](TensorNode& n) {
        TensorNode& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
            real y = n.val[i];
            p.grad[i] += n.grad[i] * y * (1.0 - y);
        }
    });
}

// ---------------------------------------------------------------- reductions

Tensor sum_all(const Tensor& a) {
    real s = 0.0;
    for (real v : a.val()) s += v;
    return make_op({1}, {s}, {a}, [](TensorNode& n) {
        TensorNode& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        real g = n.grad[0];
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
}

Tensor mean_all(const Tensor& a) {
    real s = 0.0;
    for (real v : a.val()) s += v;
    real inv = 1.0 / static_cast<real>(a.numel());
    return make_op({1}, {s * inv}, {a}, [inv](TensorNode& n) {
        TensorNode& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        real g = n.grad[0] * inv;
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    real s = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) {
        real d = a.val()[i] - b.val()[i];
        s += d * d;
    }
    real inv = 1.0 / static_cast<real>(a.numel());
    return make_op({1}, {s * inv}, {a, b}, [inv](TensorNode& n) {
        TensorNode& pa = *n.parents[0];
        TensorNode& pb = *n.parents[1];
        real g = 2.0 * n.grad[0] * inv;
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < pa.grad.size(); ++i)
                pa.grad[i] += g * (pa.val[i] - pb.val[i]);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < pb.grad.size(); ++i)
                pb.grad[i] -= g * (pa.val[i] - pb.val[i]);
        }
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    check(logits.ndim() == 2, "softmax_cross_entropy: logits must be [N, K]");
    int N = logits.dim(0);
    int K = logits.dim(1);
    check(static_cast<int>(labels.size()) == N,
          "softmax_cross_entropy: label count must match rows");
    std::vector<real> probs(static_cast<size_t>(N) * K);
    real loss = 0.0;
    for (int r = 0; r < N; ++r) {
        check(labels[r] >= 0 && labels[r] < K, "softmax_cross_entropy: label out of range");
        const real* row = logits.val().data() + static_cast<size_t>(r) * K;
        real m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        real z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
        real lse = m + std::log(z);
        for (int k = 0; k < K; ++k)
            probs[static_cast<size_t>(r) * K + k] = std::exp(row[k] - lse);
        loss += lse - row[labels[r]];
    }
    loss /= static_cast<real>(N);
    return make_op({1}, {loss}, {logits},
                   [probs = std::move(probs), labels, N, K](TensorNode& n) {
                       TensorNode& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       real g = n.grad[0] / static_cast<real>(N);
                       for (int r = 0; r < N; ++r) {
                           for (int k = 0; k < K; ++k) {
                               size_t i = static_cast<size_t>(r) * K + k;
                               real one = (k == labels[r]) ? 1.0 : 0.0;
                               p.grad[i] += g * (probs[i] - one);
                           }
                       }
                   });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    check_same_shape(logits, targets, "bce_with_logits");
    real loss = 0.0;
    for (size_t i = 0; i < logits.numel(); ++i) {
        real l = logits.val()[i];
        real t = targets.val()[i];
        loss += std::max(l, 0.0) - l * t + std::log1p(std::exp(-std::abs(l)));
    }
    real inv = 1.0 / static_cast<real>(logits.numel());
    return make_op({1}, {loss * inv}, {logits, targets}, [inv](TensorNode& n) {
        TensorNode& pl = *n.parents[0];
        TensorNode& pt = *n.parents[1];
        real g = n.grad[0] * inv;
        if (pl.requires_grad) {
            pl.ensure_grad();
            for (size_t i = 0; i < pl.grad.size(); ++i)
                pl.grad[i] += g * (sigmoid_scalar(pl.val[i]) - pt.val[i]);
        }
        if (pt.requires_grad) {
            pt.ensure_grad();
            for (size_t i = 0; i < pt.grad.size(); ++i) pt.grad[i] += g * (-pl.val[i]);
        }
    });
}

// ------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 2 && b.ndim() == 2, "matmul: operands must be 2D");
    check(a.dim(1) == b.dim(0), "matmul: inner dims differ " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    int M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<real> out(static_cast<size_t>(M) * N, 0.0);
    gemm(false, false, M, N, K, 1.0, a.val().data(), b.val().data(), 0.0, out.data());
    return make_op({M, N}, std::move(out), {a, b}, [M, K, N](TensorNode& n) {
        TensorNode& pa = *n.parents[0];
        TensorNode& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            // dA = dC * B^T
            gemm(false, true, M, K, N, 1.0, n.grad.data(), pb.val.data(), 1.0, pa.grad.data());
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            // dB = A^T * dC
            gemm(true, false, K, N, M, 1.0, pa.val.data(), n.grad.data(), 1.0, pb.grad.data());
        }
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 2 && b.ndim() == 2, "matmul_nt: operands must be 2D");
    check(a.dim(1) == b.dim(1), "matmul_nt: inner dims differ " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()) + "^T");
    int M = a.dim(0), K = a.dim(1), N = b.dim(0);
    std::vector<real> out(static_cast<size_t>(M) * N, 0.0);
    // C[M,N] = A[M,K] * B[N,K]^T
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, M, N, K, 1.0, a.val().data(), K,
                b.val().data(), K, 0.0, out.data(), N);
    return make_op({M, N}, std::move(out), {a, b}, [M, K, N](TensorNode& n) {
        TensorNode& pa = *n.parents[0];
        TensorNode& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            // dA[M,K] = dC[M,N] * B[N,K]
            gemm(false, false, M, K, N, 1.0, n.grad.data(), pb.val.data(), 1.0, pa.grad.data());
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            // dB[N,K] = dC^T[N,M] * A[M,K]
            gemm(true, false, N, K, M, 1.0, n.grad.data(), pa.val.data(), 1.0, pb.grad.data());
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check(x.ndim() == 2 && w.ndim() == 2, "linear: x and w must be 2D");
    check(x.dim(1) == w.dim(1), "linear: feature dims differ " + shape_str(x.shape()) +
                                    " vs w " + shape_str(w.shape()));
    int N = x.dim(0), D = x.dim(1), O = w.dim(0);
    bool has_bias = b.defined();
    if (has_bias) {
        check(b.ndim() == 1 && b.dim(0) == O, "linear: bias must be [out_features]");
    }
    std::vector<real> out(static_cast<size_t>(N) * O, 0.0);
    // y[N,O] = x[N,D] * w[O,D]^T
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, N, O, D, 1.0, x.val().data(), D,
                w.val().data(), D, 0.0, out.data(), O);
    if (has_bias) {
        for (int r = 0; r < N; ++r)
            for (int o = 0; o < O; ++o) out[static_cast<size_t>(r) * O + o] += b.val()[o];
    }
    std::vector<Tensor> parents = {x, w};
    if (has_bias) parents.push_back(b);
    return make_op({N, O}, std::move(out), std::move(parents),
                   [N, D, O, has_bias](TensorNode& n) {
                       TensorNode& px = *n.parents[0];
                       TensorNode& pw = *n.parents[1];
                       if (px.requires_grad) {
                           px.ensure_grad();
                           // dx[N,D] = dy[N,O] * w[O,D]
                           gemm(false, false, N, D, O, 1.0, n.grad.data(), pw.val.data(), 1.0,
                                px.grad.data());
                       }
                       if (pw.requires_grad) {
                           pw.ensure_grad();
                           // dw[O,D] = dy^T[O,N] * x[N,D]
                           gemm(true, false, O, D, N, 1.0, n.grad.data(), px.val.data(), 1.0,
                                pw.grad.data());
                       }
                       if (has_bias) {
                           TensorNode& pb = *n.parents[2];
                           if (pb.requires_grad) {
                               pb.ensure_grad();
                               for (int r = 0; r < N; ++r)
                                   for (int o = 0; o < O; ++o)
                                       pb.grad[o] += n.grad[static_cast<size_t>(r) * O + o];
                           }
                       }
                   });
}

// ------------------------------------------------------------------ shape ops

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    check(shape_numel(shape) == x.numel(),
          "reshape: element count mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
    return make_op(std::move(shape), x.val(), {x},
                   [](TensorNode& n) { accumulate(*n.parents[0], n.grad); });
}

Tensor nchw_to_tokens(const Tensor& x) {
    check(x.ndim() == 4, "nchw_to_tokens: input must be [N, C, H, W]");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int T = H * W;
    std::vector<real> out(x.numel());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int t = 0; t < T; ++t)
                out[(static_cast<size_t>(n) * T + t) * C + c] =
                    x.val()[(static_cast<size_t>(n) * C + c) * T + t];
    return make_op({N, T, C}, std::move(out), {x}, [N, C, T](TensorNode& nd) {
        TensorNode& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int t = 0; t < T; ++t)
                    p.grad[(static_cast<size_t>(n) * C + c) * T + t] +=
                        nd.grad[(static_cast<size_t>(n) * T + t) * C + c];
    });
}

Tensor tokens_to_nchw(const Tensor& x, int h, int w) {
    check(x.ndim() == 3, "tokens_to_nchw: input must be [N, T, C]");
    int N = x.dim(0), T = x.dim(1), C = x.dim(2);
    check(T == h * w, "tokens_to_nchw: token count must equal h*w");
    std::vector<real> out(x.numel());
    for (int n = 0; n < N; ++n)
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < C; ++c)
                out[(static_cast<size_t>(n) * C + c) * T + t] =
                    x.val()[(static_cast<size_t>(n) * T + t) * C + c];
    return make_op({N, C, h, w}, std::move(out), {x}, [N, C, T](TensorNode& nd) {
        TensorNode& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int t = 0; t < T; ++t)
                for (int c = 0; c < C; ++c)
                    p.grad[(static_cast<size_t>(n) * T + t) * C + c] +=
                        nd.grad[(static_cast<size_t>(n) * C + c) * T + t];
    });
}

Tensor concat_tokens(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 3 && b.ndim() == 3, "concat_tokens: inputs must be [N, T, C]");
    check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
          "concat_tokens: batch/channel dims differ " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
    int N = a.dim(0), Ta = a.dim(1), Tb = b.dim(1), C = a.dim(2);
    std::vector<real> out(static_cast<size_t>(N) * (Ta + Tb) * C);
    size_t rowa = static_cast<size_t>(Ta) * C, rowb = static_cast<size_t>(Tb) * C;
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.val().data() + n * rowa, rowa, out.data() + n * (rowa + rowb));
        std::copy_n(b.val().data() + n * rowb, rowb, out.data() + n * (rowa + rowb) + rowa);
    }
    return make_op({N, Ta + Tb, C}, std::move(out), {a, b}, [N, rowa, rowb](TensorNode& nd) {
        TensorNode& pa = *nd.parents[0];
        TensorNode& pb = *nd.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int n = 0; n < N; ++n) {
            const real* g = nd.grad.data() + n * (rowa + rowb);
            if (pa.requires_grad)
                for (size_t i = 0; i < rowa; ++i) pa.grad[n * rowa + i] += g[i];
            if (pb.requires_grad)
                for (size_t i = 0; i < rowb; ++i) pb.grad[n * rowb + i] += g[rowa + i];
        }
    });
}

Tensor slice_tokens(const Tensor& x, int t0, int t1) {
    check(x.ndim() == 3, "slice_tokens: input must be [N, T, C]");
    int N = x.dim(0), T = x.dim(1), C = x.dim(2);
    check(0 <= t0 && t0 < t1 && t1 <= T, "slice_tokens: bad range");
    int Ts = t1 - t0;
    std::vector<real> out(static_cast<size_t>(N) * Ts * C);
    for (int n = 0; n < N; ++n)
        std::copy_n(x.val().data() + (static_cast<size_t>(n) * T + t0) * C,
                    static_cast<size_t>(Ts) * C, out.data() + static_cast<size_t>(n) * Ts * C);
    return make_op({N, Ts, C}, std::move(out), {x}, [N, T, C, t0, Ts](TensorNode& nd) {
        TensorNode& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int n = 0; n < N; ++n) {
            size_t src = static_cast<size_t>(n) * Ts * C;
            size_t dst = (static_cast<size_t>(n) * T + t0) * C;
            for (size_t i = 0; i < static_cast<size_t>(Ts) * C; ++i)
                p.grad[dst + i] += nd.grad[src + i];
        }
    });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 4 && b.ndim() == 4, "concat_channels: inputs must be [N, C, H, W]");
    check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: spatial/batch dims differ " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
    int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    size_t plane = static_cast<size_t>(H) * W;
    std::vector<real> out(static_cast<size_t>(N) * (Ca + Cb) * plane);
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.val().data() + n * Ca * plane, Ca * plane,
                    out.data() + static_cast<size_t>(n) * (Ca + Cb) * plane);
        std::copy_n(b.val().data() + n * Cb * plane, Cb * plane,
                    out.data() + static_cast<size_t>(n) * (Ca + Cb) * plane + Ca * plane);
    }
    return make_op({N, Ca + Cb, H, W}, std::move(out), {a, b},
                   [N, Ca, Cb, plane](TensorNode& nd) {
                       TensorNode& pa = *nd.parents[0];
                       TensorNode& pb = *nd.parents[1];
                       if (pa.requires_grad) pa.ensure_grad();
                       if (pb.requires_grad) pb.ensure_grad();
                       for (int n = 0; n < N; ++n) {
                           const real* g = nd.grad.data() + static_cast<size_t>(n) * (Ca + Cb) * plane;
                           if (pa.requires_grad)
                               for (size_t i = 0; i < Ca * plane; ++i)
                                   pa.grad[n * Ca * plane + i] += g[i];
                           if (pb.requires_grad)
                               for (size_t i = 0; i < Cb * plane; ++i)
                                   pb.grad[n * Cb * plane + i] += g[Ca * plane + i];
                       }
                   });
}

Tensor concat_height(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 4 && b.ndim() == 4, "concat_height: inputs must be [N, C, H, W]");
    check(a.dim(0) == b.dim(0) && a.dim(1) == b.dim(1) && a.dim(3) == b.dim(3),
          "concat_height: dims differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int N = a.dim(0), C = a.dim(1), Ha = a.dim(2), Hb = b.dim(2), W = a.dim(3);
    std::vector<real> out(static_cast<size_t>(N) * C * (Ha + Hb) * W);
    size_t rowa = static_cast<size_t>(Ha) * W, rowb = static_cast<size_t>(Hb) * W;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            size_t dst = (static_cast<size_t>(n) * C + c) * (rowa + rowb);
            std::copy_n(a.val().data() + (static_cast<size_t>(n) * C + c) * rowa, rowa,
                        out.data() + dst);
            std::copy_n(b.val().data() + (static_cast<size_t>(n) * C + c) * rowb, rowb,
                        out.data() + dst + rowa);
        }
    }
    return make_op({N, C, Ha + Hb, W}, std::move(out), {a, b},
                   [N, C, rowa, rowb](TensorNode& nd) {
                       TensorNode& pa = *nd.parents[0];
                       TensorNode& pb = *nd.parents[1];
                       if (pa.requires_grad) pa.ensure_grad();
                       if (pb.requires_grad) pb.ensure_grad();
                       for (int n = 0; n < N; ++n) {
                           for (int c = 0; c < C; ++c) {
                               size_t src = (static_cast<size_t>(n) * C + c) * (rowa + rowb);
                               if (pa.requires_grad)
                                   for (size_t i = 0; i < rowa; ++i)
                                       pa.grad[(static_cast<size_t>(n) * C + c) * rowa + i] +=
                                           nd.grad[src + i];
                               if (pb.requires_grad)
                                   for (size_t i = 0; i < rowb; ++i)
                                       pb.grad[(static_cast<size_t>(n) * C + c) * rowb + i] +=
                                           nd.grad[src + rowa + i];
                           }
                       }
                   });
}

// --------------------------------------------------------- conv / norm / pool

namespace {

struct ConvDims {
    int N, C, H, W, O, kh, kw, stride, pad, Ho, Wo;
};

void im2col(const real* x, const ConvDims& d, int n, std::vector<real>& cols) {
    // cols layout: [C*kh*kw, Ho*Wo]
    int HW = d.Ho * d.Wo;
    cols.assign(static_cast<size_t>(d.C) * d.kh * d.kw * HW, 0.0);
    const real* xn = x + static_cast<size_t>(n) * d.C * d.H * d.W;
    for (int c = 0; c < d.C; ++c) {
        for (int ky = 0; ky < d.kh; ++ky) {
            for (int kx = 0; kx < d.kw; ++kx) {
                real* dst = cols.data() +
                            (static_cast<size_t>(c) * d.kh * d.kw + ky * d.kw + kx) * HW;
                for (int oy = 0; oy < d.Ho; ++oy) {
                    int iy = oy * d.stride + ky - d.pad;
                    if (iy < 0 || iy >= d.H) continue;
                    for (int ox = 0; ox < d.Wo; ++ox) {
                        int ix = ox * d.stride + kx - d.pad;
                        if (ix < 0 || ix >= d.W) continue;
                        dst[oy * d.Wo + ox] = xn[(static_cast<size_t>(c) * d.H + iy) * d.W + ix];
                    }
                }
            }
        }
    }
}

void col2im_add(const std::vector<real>& cols, const ConvDims& d, int n, real* dx) {
    int HW = d.Ho * d.Wo;
    real* xn = dx + static_cast<size_t>(n) * d.C * d.H * d.W;
    for (int c = 0; c < d.C; ++c) {
        for (int ky = 0; ky < d.kh; ++ky) {
            for (int kx = 0; kx < d.kw; ++kx) {
                const real* src = cols.data() +
                                  (static_cast<size_t>(c) * d.kh * d.kw + ky * d.kw + kx) * HW;
                for (int oy = 0; oy < d.Ho; ++oy) {
                    int iy = oy * d.stride + ky - d.pad;
                    if (iy < 0 || iy >= d.H) continue;
                    for (int ox = 0; ox < d.Wo; ++ox) {
                        int ix = ox * d.stride + kx - d.pad;
                        if (ix < 0 || ix >= d.W) continue;
                        xn[(static_cast<size_t>(c) * d.H + iy) * d.W + ix] += src[oy * d.Wo + ox];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check(x.ndim() == 4, "conv2d: input must be [N, C, H, W]");
    check(w.ndim() == 4, "conv2d: weight must be [O, C, kh, kw]");
    check(x.dim(1) == w.dim(1), "conv2d: channel mismatch x " + shape_str(x.shape()) +
                                    " vs w " + shape_str(w.shape()));
    check(stride >= 1, "conv2d: stride must be >= 1");
    check(pad >= 0, "conv2d: pad must be >= 0");
    ConvDims d;
    d.N = x.dim(0);
    d.C = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.O = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    check(d.H + 2 * pad >= d.kh && d.W + 2 * pad >= d.kw, "conv2d: kernel larger than input");
    d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
    bool has_bias = b.defined();
    if (has_bias) check(b.ndim() == 1 && b.dim(0) == d.O, "conv2d: bias must be [out_channels]");

    int HW = d.Ho * d.Wo;
    int CKK = d.C * d.kh * d.kw;
    std::vector<real> out(static_cast<size_t>(d.N) * d.O * HW, 0.0);
    std::vector<real> cols;
    for (int n = 0; n < d.N; ++n) {
        im2col(x.val().data(), d, n, cols);
        // y[n] [O, HW] = w [O, CKK] * cols [CKK, HW]
        gemm(false, false, d.O, HW, CKK, 1.0, w.val().data(), cols.data(), 0.0,
             out.data() + static_cast<size_t>(n) * d.O * HW);
    }
    if (has_bias) {
        for (int n = 0; n < d.N; ++n)
            for (int o = 0; o < d.O; ++o) {
                real bv = b.val()[o];
                real* dst = out.data() + (static_cast<size_t>(n) * d.O + o) * HW;
                for (int i = 0; i < HW; ++i) dst[i] += bv;
            }
    }
    std::vector<Tensor> parents = {x, w};
    if (has_bias) parents.push_back(b);
    return make_op({d.N, d.O, d.Ho, d.Wo}, std::move(out), std::move(parents),
                   [d, has_bias](TensorNode& nd) {
                       TensorNode& px = *nd.parents[0];
                       TensorNode& pw = *nd.parents[1];
                       int HW = d.Ho * d.Wo;
                       int CKK = d.C * d.kh * d.kw;
                       if (px.requires_grad) px.ensure_grad();
                       if (pw.requires_grad) pw.ensure_grad();
                       std::vector<real> cols, dcols;
                       for (int n = 0; n < d.N; ++n) {
                           const real* dy = nd.grad.data() + static_cast<size_t>(n) * d.O * HW;
                           if (pw.requires_grad) {
                               im2col(px.val.data(), d, n, cols);
                               // dW [O, CKK] += dy [O, HW] * cols^T [HW, CKK]
                               cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, d.O, CKK,
                                           HW, 1.0, dy, HW, cols.data(), HW, 1.0,
                                           pw.grad.data(), CKK);
                           }
                           if (px.requires_grad) {
                               dcols.assign(static_cast<size_t>(CKK) * HW, 0.0);
                               // dcols [CKK, HW] = w^T [CKK, O] * dy [O, HW]
                               gemm(true, false, CKK, HW, d.O, 1.0, pw.val.data(), dy, 0.0,
                                    dcols.data());
                               col2im_add(dcols, d, n, px.grad.data());
                           }
                       }
                       if (has_bias) {
                           TensorNode& pb = *nd.parents[2];
                           if (pb.requires_grad) {
                               pb.ensure_grad();
                               for (int n = 0; n < d.N; ++n)
                                   for (int o = 0; o < d.O; ++o) {
                                       const real* dy = nd.grad.data() +
                                                        (static_cast<size_t>(n) * d.O + o) * HW;
                                       real s = 0.0;
                                       for (int i = 0; i < HW; ++i) s += dy[i];
                                       pb.grad[o] += s;
                                   }
                           }
                       }
                   });
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  real eps) {
    check(x.ndim() == 4, "group_norm: input must be [N, C, H, W]");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(groups >= 1 && C % groups == 0, "group_norm: channels must divide evenly into groups");
    check(gamma.ndim() == 1 && gamma.dim(0) == C, "group_norm: gamma must be [C]");
    check(beta.ndim() == 1 && beta.dim(0) == C, "group_norm: beta must be [C]");
    int cpg = C / groups;
    size_t plane = static_cast<size_t>(H) * W;
    size_t gsize = static_cast<size_t>(cpg) * plane;

    auto xhat = std::make_shared<std::vector<real>>(x.numel());
    auto inv_std = std::make_shared<std::vector<real>>(static_cast<size_t>(N) * groups);
    std::vector<real> out(x.numel());
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const real* src = x.val().data() + (static_cast<size_t>(n) * C + g * cpg) * plane;
            real mu = 0.0;
            for (size_t i = 0; i < gsize; ++i) mu += src[i];
            mu /= static_cast<real>(gsize);
            real var = 0.0;
            for (size_t i = 0; i < gsize; ++i) {
                real dv = src[i] - mu;
                var += dv * dv;
            }
            var /= static_cast<real>(gsize);
            real inv = 1.0 / std::sqrt(var + eps);
            (*inv_std)[static_cast<size_t>(n) * groups + g] = inv;
            size_t base = (static_cast<size_t>(n) * C + g * cpg) * plane;
            for (int c = 0; c < cpg; ++c) {
                real gm = gamma.val()[g * cpg + c];
                real bt = beta.val()[g * cpg + c];
                for (size_t i = 0; i < plane; ++i) {
                    size_t idx = base + c * plane + i;
                    real xh = (x.val()[idx] - mu) * inv;
                    (*xhat)[idx] = xh;
                    out[idx] = gm * xh + bt;
                }
            }
        }
    }
    return make_op(
        x.shape(), std::move(out), {x, gamma, beta},
        [N, C, groups, cpg, plane, gsize, xhat, inv_std](TensorNode& nd) {
            TensorNode& px = *nd.parents[0];
            TensorNode& pg = *nd.parents[1];
            TensorNode& pb = *nd.parents[2];
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        size_t base = (static_cast<size_t>(n) * C + c) * plane;
                        real s = 0.0;
                        for (size_t i = 0; i < plane; ++i)
                            s += nd.grad[base + i] * (*xhat)[base + i];
                        pg.grad[c] += s;
                    }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        size_t base = (static_cast<size_t>(n) * C + c) * plane;
                        real s = 0.0;
                        for (size_t i = 0; i < plane; ++i) s += nd.grad[base + i];
                        pb.grad[c] += s;
                    }
            }
            if (px.requires_grad) {
                px.ensure_grad();
                for (int n = 0; n < N; ++n) {
                    for (int g = 0; g < groups; ++g) {
                        size_t base = (static_cast<size_t>(n) * C + g * cpg) * plane;
                        real inv = (*inv_std)[static_cast<size_t>(n) * groups + g];
                        real s1 = 0.0, s2 = 0.0;
                        for (int c = 0; c < cpg; ++c) {
                            real gm = pg.val[g * cpg + c];
                            for (size_t i = 0; i < plane; ++i) {
                                size_t idx = base + c * plane + i;
                                real dxh = nd.grad[idx] * gm;
                                s1 += dxh;
                                s2 += dxh * (*xhat)[idx];
                            }
                        }
                        real inv_m = 1.0 / static_cast<real>(gsize);
                        for (int c = 0; c < cpg; ++c) {
                            real gm = pg.val[g * cpg + c];
                            for (size_t i = 0; i < plane; ++i) {
                                size_t idx = base + c * plane + i;
                                real dxh = nd.grad[idx] * gm;
                                px.grad[idx] +=
                                    inv * (dxh - s1 * inv_m - (*xhat)[idx] * s2 * inv_m);
                            }
                        }
                    }
                }
            }
        });
}

Tensor upsample_nearest2x(const Tensor& x) {
    check(x.ndim() == 4, "upsample_nearest2x: input must be [N, C, H, W]");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Ho = H * 2, Wo = W * 2;
    std::vector<real> out(static_cast<size_t>(N) * C * Ho * Wo);
    for (int nc = 0; nc < N * C; ++nc) {
        const real* src = x.val().data() + static_cast<size_t>(nc) * H * W;
        real* dst = out.data() + static_cast<size_t>(nc) * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
            for (int xx = 0; xx < Wo; ++xx)
                dst[y * Wo + xx] = src[(y / 2) * W + (xx / 2)];
    }
    return make_op({N, C, Ho, Wo}, std::move(out), {x}, [N, C, H, W](TensorNode& nd) {
        TensorNode& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        int Ho = H * 2, Wo = W * 2;
        for (int nc = 0; nc < N * C; ++nc) {
            const real* g = nd.grad.data() + static_cast<size_t>(nc) * Ho * Wo;
            real* dst = p.grad.data() + static_cast<size_t>(nc) * H * W;
            for (int y = 0; y < Ho; ++y)
                for (int xx = 0; xx < Wo; ++xx) dst[(y / 2) * W + (xx / 2)] += g[y * Wo + xx];
        }
    });
}

namespace {

struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<real> w1; // weight of i1; weight of i0 is 1-w1
};

LerpAxis make_lerp(int in_size, int out_size) {
    LerpAxis ax;
    ax.i0.resize(out_size);
    ax.i1.resize(out_size);
    ax.w1.resize(out_size);
    real scale = static_cast<real>(in_size) / out_size;
    for (int o = 0; o < out_size; ++o) {
        real pos = (o + 0.5) * scale - 0.5;
        if (pos < 0.0) pos = 0.0;
        if (pos > in_size - 1) pos = in_size - 1;
        int lo = static_cast<int>(std::floor(pos));
        int hi = std::min(lo + 1, in_size - 1);
        ax.i0[o] = lo;
        ax.i1[o] = hi;
        ax.w1[o] = pos - lo;
    }
    return ax;
}

} // namespace

Tensor bilinear_resize(const Tensor& x, int oh, int ow) {
    check(x.ndim() == 4, "bilinear_resize: input must be [N, C, H, W]");
    check(oh > 0 && ow > 0, "bilinear_resize: output size must be positive");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto ay = std::make_shared<LerpAxis>(make_lerp(H, oh));
    auto axx = std::make_shared<LerpAxis>(make_lerp(W, ow));
    std::vector<real> out(static_cast<size_t>(N) * C * oh * ow);
    for (int nc = 0; nc < N * C; ++nc) {
        const real* src = x.val().data() + static_cast<size_t>(nc) * H * W;
        real* dst = out.data() + static_cast<size_t>(nc) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            int y0 = ay->i0[y], y1 = ay->i1[y];
            real wy = ay->w1[y];
            for (int xo = 0; xo < ow; ++xo) {
                int x0 = axx->i0[xo], x1 = axx->i1[xo];
                real wx = axx->w1[xo];
                real v00 = src[y0 * W + x0], v01 = src[y0 * W + x1];
                real v10 = src[y1 * W + x0], v11 = src[y1 * W + x1];
                dst[y * ow + xo] = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                   wy * ((1 - wx) * v10 + wx * v11);
            }
        }
    }
    return make_op({N, C, oh, ow}, std::move(out), {x},
                   [N, C, H, W, oh, ow, ay, axx](TensorNode& nd) {
                       TensorNode& p = *nd.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (int nc = 0; nc < N * C; ++nc) {
                           const real* g = nd.grad.data() + static_cast<size_t>(nc) * oh * ow;
                           real* dst = p.grad.data() + static_cast<size_t>(nc) * H * W;
                           for (int y = 0; y < oh; ++y) {
                               int y0 = ay->i0[y], y1 = ay->i1[y];
                               real wy = ay->w1[y];
                               for (int xo = 0; xo < ow; ++xo) {
                                   int x0 = axx->i0[xo], x1 = axx->i1[xo];
                                   real wx = axx->w1[xo];
                                   real gv = g[y * ow + xo];
                                   dst[y0 * W + x0] += gv * (1 - wy) * (1 - wx);
                                   dst[y0 * W + x1] += gv * (1 - wy) * wx;
                                   dst[y1 * W + x0] += gv * wy * (1 - wx);
                                   dst[y1 * W + x1] += gv * wy * wx;
                               }
                           }
                       }
                   });
}

Tensor adaptive_avg_pool(const Tensor& x, int oh, int ow) {
    check(x.ndim() == 4, "adaptive_avg_pool: input must be [N, C, H, W]");
    check(oh > 0 && ow > 0, "adaptive_avg_pool: output size must be positive");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(oh <= H && ow <= W, "adaptive_avg_pool: output larger than input");
    std::vector<real> out(static_cast<size_t>(N) * C * oh * ow, 0.0);
    auto ys = [H, oh](int o) { return (o * H) / oh; };
    auto ye = [H, oh](int o) { return ((o + 1) * H + oh - 1) / oh; };
    auto xs = [W, ow](int o) { return (o * W) / ow; };
    auto xe = [W, ow](int o) { return ((o + 1) * W + ow - 1) / ow; };
    for (int nc = 0; nc < N * C; ++nc) {
        const real* src = x.val().data() + static_cast<size_t>(nc) * H * W;
        real* dst = out.data() + static_cast<size_t>(nc) * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                real s = 0.0;
                int cnt = 0;
                for (int y = ys(oy); y < ye(oy); ++y)
                    for (int xx = xs(ox); xx < xe(ox); ++xx) {
                        s += src[y * W + xx];
                        ++cnt;
                    }
                dst[oy * ow + ox] = s / cnt;
            }
    }
    return make_op({N, C, oh, ow}, std::move(out), {x}, [N, C, H, W, oh, ow](TensorNode& nd) {
        TensorNode& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        auto ys = [H, oh](int o) { return (o * H) / oh; };
        auto ye = [H, oh](int o) { return ((o + 1) * H + oh - 1) / oh; };
        auto xs = [W, ow](int o) { return (o * W) / ow; };
        auto xe = [W, ow](int o) { return ((o + 1) * W + ow - 1) / ow; };
        for (int nc = 0; nc < N * C; ++nc) {
            const real* g = nd.grad.data() + static_cast<size_t>(nc) * oh * ow;
            real* dst = p.grad.data() + static_cast<size_t>(nc) * H * W;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    int cnt = (ye(oy) - ys(oy)) * (xe(ox) - xs(ox));
                    real gv = g[oy * ow + ox] / cnt;
                    for (int y = ys(oy); y < ye(oy); ++y)
                        for (int xx = xs(ox); xx < xe(ox); ++xx) dst[y * W + xx] += gv;
                }
        }
    });
}

// ----------------------------------------------------------- attention / misc

Tensor softmax_rows(const Tensor& x) {
    check(x.ndim() == 2, "softmax_rows: input must be 2D");
    int R = x.dim(0), C = x.dim(1);
    std::vector<real> out(x.numel());
    for (int r = 0; r < R; ++r) {
        const real* row = x.val().data() + static_cast<size_t>(r) * C;
        real* orow = out.data() + static_cast<size_t>(r) * C;
        real m = row[0];
        for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
        real z = 0.0;
        for (int c = 0; c < C; ++c) {
            orow[c] = std::exp(row[c] - m);
            z += orow[c];
        }
        for (int c = 0; c < C; ++c) orow[c] /= z;
    }
    return make_op(x.shape(), std::move(out), {x}, [R, C](TensorNode& nd) {
        TensorNode& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int r = 0; r < R; ++r) {
            const real* y = nd.val.data() + static_cast<size_t>(r) * C;
            const real* g = nd.grad.data() + static_cast<size_t>(r) * C;
            real dot = 0.0;
            for (int c = 0; c < C; ++c) dot += y[c] * g[c];
            real* dst = p.grad.data() + static_cast<size_t>(r) * C;
            for (int c = 0; c < C; ++c) dst[c] += y[c] * (g[c] - dot);
        }
    });
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 3 && b.ndim() == 3, "bmm_nt: operands must be 3D");
    check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
          "bmm_nt: batch/inner dims differ " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()) + "^T");
    int N = a.dim(0), T = a.dim(1), D = a.dim(2), S = b.dim(1);
    std::vector<real> out(static_cast<size_t>(N) * T * S, 0.0);
    for (int n = 0; n < N; ++n) {
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, T, S, D, 1.0,
                    a.val().data() + static_cast<size_t>(n) * T * D, D,
                    b.val().data() + static_cast<size_t>(n) * S * D, D, 0.0,
                    out.data() + static_cast<size_t>(n) * T * S, S);
    }
    return make_op({N, T, S}, std::move(out), {a, b}, [N, T, D, S](TensorNode& nd) {
        TensorNode& pa = *nd.parents[0];
        TensorNode& pb = *nd.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int n = 0; n < N; ++n) {
            const real* dc = nd.grad.data() + static_cast<size_t>(n) * T * S;
            if (pa.requires_grad) {
                // dA[T,D] = dC[T,S] * B[S,D]
                gemm(false, false, T, D, S, 1.0, dc,
                     pb.val.data() + static_cast<size_t>(n) * S * D, 1.0,
                     pa.grad.data() + static_cast<size_t>(n) * T * D);
            }
            if (pb.requires_grad) {
                // dB[S,D] = dC^T[S,T] * A[T,D]
                gemm(true, false, S, D, T, 1.0, dc,
                     pa.val.data() + static_cast<size_t>(n) * T * D, 1.0,
                     pb.grad.data() + static_cast<size_t>(n) * S * D);
            }
        }
    });
}

Tensor bmm_nn(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 3 && b.ndim() == 3, "bmm_nn: operands must be 3D");
    check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
          "bmm_nn: batch/inner dims differ " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
    int N = a.dim(0), T = a.dim(1), S = a.dim(2), D = b.dim(2);
    std::vector<real> out(static_cast<size_t>(N) * T * D, 0.0);
    for (int n = 0; n < N; ++n) {
        gemm(false, false, T, D, S, 1.0, a.val().data() + static_cast<size_t>(n) * T * S,
             b.val().data() + static_cast<size_t>(n) * S * D, 0.0,
             out.data() + static_cast<size_t>(n) * T * D);
    }
    return make_op({N, T, D}, std::move(out), {a, b}, [N, T, S, D](TensorNode& nd) {
        TensorNode& pa = *nd.parents[0];
        TensorNode& pb = *nd.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int n = 0; n < N; ++n) {
            const real* dc = nd.grad.data() + static_cast<size_t>(n) * T * D;
            if (pa.requires_grad) {
                // dA[T,S] = dC[T,D] * B[S,D]^T
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, T, S, D, 1.0, dc, D,
                            pb.val.data() + static_cast<size_t>(n) * S * D, D, 1.0,
                            pa.grad.data() + static_cast<size_t>(n) * T * S, S);
            }
            if (pb.requires_grad) {
                // dB[S,D] = A^T[S,T] * dC[T,D]
                gemm(true, false, S, D, T, 1.0,
                     pa.val.data() + static_cast<size_t>(n) * T * S, dc, 1.0,
                     pb.grad.data() + static_cast<size_t>(n) * S * D);
            }
        }
    });
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
    check(table.ndim() == 2, "embed_rows: table must be [V, D]");
    int V = table.dim(0), D = table.dim(1);
    int n = static_cast<int>(ids.size());
    check(n > 0, "embed_rows: ids must be non-empty");
    std::vector<real> out(static_cast<size_t>(n) * D);
    for (int i = 0; i < n; ++i) {
        check(ids[i] >= 0 && ids[i] < V, "embed_rows: id out of range");
        std::copy_n(table.val().data() + static_cast<size_t>(ids[i]) * D, D,
                    out.data() + static_cast<size_t>(i) * D);
    }
    return make_op({n, D}, std::move(out), {table}, [ids, D](TensorNode& nd) {
        TensorNode& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            const real* g = nd.grad.data() + i * D;
            real* dst = p.grad.data() + static_cast<size_t>(ids[i]) * D;
            for (int d = 0; d < D; ++d) dst[d] += g[d];
        }
    });
}

Tensor add_channel_rows(const Tensor& x, const Tensor& rows) {
    check(x.ndim() == 4, "add_channel_rows: x must be [N, C, H, W]");
    check(rows.ndim() == 2 && rows.dim(0) == x.dim(0) && rows.dim(1) == x.dim(1),
          "add_channel_rows: rows must be [N, C]");
    int N = x.dim(0), C = x.dim(1);
    size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
    std::vector<real> out(x.numel());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            real bv = rows.val()[static_cast<size_t>(n) * C + c];
            size_t base = (static_cast<size_t>(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) out[base + i] = x.val()[base + i] + bv;
        }
    return make_op(x.shape(), std::move(out), {x, rows}, [N, C, plane](TensorNode& nd) {
        TensorNode& px = *nd.parents[0];
        TensorNode& pr = *nd.parents[1];
        accumulate(px, nd.grad);
        if (pr.requires_grad) {
            pr.ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    size_t base = (static_cast<size_t>(n) * C + c) * plane;
                    real s = 0.0;
                    for (size_t i = 0; i < plane; ++i) s += nd.grad[base + i];
                    pr.grad[static_cast<size_t>(n) * C + c] += s;
                }
        }
    });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    check(x.ndim() == 4, "add_channel_bias: x must be [N, C, H, W]");
    check(bias.ndim() == 1 && bias.dim(0) == x.dim(1), "add_channel_bias: bias must be [C]");
    int N = x.dim(0), C = x.dim(1);
    size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
    std::vector<real> out(x.numel());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            real bv = bias.val()[c];
            size_t base = (static_cast<size_t>(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) out[base + i] = x.val()[base + i] + bv;
        }
    return make_op(x.shape(), std::move(out), {x, bias}, [N, C, plane](TensorNode& nd) {
        TensorNode& px = *nd.parents[0];
        TensorNode& pb = *nd.parents[1];
        accumulate(px, nd.grad);
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    size_t base = (static_cast<size_t>(n) * C + c) * plane;
                    real s = 0.0;
                    for (size_t i = 0; i < plane; ++i) s += nd.grad[base + i];
                    pb.grad[c] += s;
                }
        }
    });
}

Tensor mask_token_add(const Tensor& f, const Tensor& m, const Tensor& vb, const Tensor& vf) {
    check(f.ndim() == 4, "mask_token_add: feature must be [N, C, h, w]");
    check(m.ndim() == 4 && m.dim(1) == 1, "mask_token_add: mask must be [N, 1, h, w]");
    check(m.dim(0) == f.dim(0) && m.dim(2) == f.dim(2) && m.dim(3) == f.dim(3),
          "mask_token_add: mask spatial dims must match feature " + shape_str(f.shape()) +
              " vs " + shape_str(m.shape()));
    check(!m.requires_grad(), "mask_token_add: mask must not require gradients");
    int C = f.dim(1);
    check(vb.ndim() == 1 && vb.dim(0) == C, "mask_token_add: background token must be [C]");
    check(vf.ndim() == 1 && vf.dim(0) == C, "mask_token_add: foreground token must be [C]");
    int N = f.dim(0);
    size_t plane = static_cast<size_t>(f.dim(2)) * f.dim(3);
    std::vector<real> out(f.numel());
    for (int n = 0; n < N; ++n) {
        const real* mp = m.val().data() + static_cast<size_t>(n) * plane;
        for (int c = 0; c < C; ++c) {
            real b = vb.val()[c], fg = vf.val()[c];
            size_t base = (static_cast<size_t>(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i)
                out[base + i] = f.val()[base + i] + b * mp[i] + fg * (1.0 - mp[i]);
        }
    }
    return make_op(f.shape(), std::move(out), {f, m, vb, vf}, [N, C, plane](TensorNode& nd) {
        TensorNode& pf = *nd.parents[0];
        TensorNode& pm = *nd.parents[1];
        TensorNode& pvb = *nd.parents[2];
        TensorNode& pvf = *nd.parents[3];
        accumulate(pf, nd.grad);
        if (pvb.requires_grad || pvf.requires_grad) {
            if (pvb.requires_grad) pvb.ensure_grad();
            if (pvf.requires_grad) pvf.ensure_grad();
            for (int n = 0; n < N; ++n) {
                const real* mp = pm.val.data() + static_cast<size_t>(n) * plane;
                for (int c = 0; c < C; ++c) {
                    size_t base = (static_cast<size_t>(n) * C + c) * plane;
                    real sb = 0.0, sf = 0.0;
                    for (size_t i = 0; i < plane; ++i) {
                        sb += nd.grad[base + i] * mp[i];
                        sf += nd.grad[base + i] * (1.0 - mp[i]);
                    }
                    if (pvb.requires_grad) pvb.grad[c] += sb;
                    if (pvf.requires_grad) pvf.grad[c] += sf;
                }
            }
        }
    });
}

} // namespace charpipe
