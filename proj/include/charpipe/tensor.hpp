#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "charpipe/common.hpp"
#include "charpipe/rng.hpp"

namespace charpipe {

class Tensor;

// One node of the autodiff graph. val is always populated; grad is allocated
// lazily when the first gradient lands. backward reads this node's grad and
// accumulates into the parents' grads.
struct TensorNode {
    std::vector<int> shape;
    std::vector<real> val;
    std::vector<real> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;

    size_t numel() const { return val.size(); }
    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
    }
};

// Value-semantics handle to a graph node. Copying a Tensor copies the handle,
// not the storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, real value);
    static Tensor from_data(std::vector<int> shape, std::vector<real> data,
                            bool requires_grad = false);
    static Tensor scalar(real v);
    static Tensor randn(std::vector<int> shape, Rng& rng, real stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    size_t numel() const { return node_->val.size(); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }

    std::vector<real>& val() { return node_->val; }
    const std::vector<real>& val() const { return node_->val; }
    std::vector<real>& grad() { return node_->grad; }
    const std::vector<real>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    void zero_grad() {
        if (node_) node_->grad.assign(node_->val.size(), 0.0);
    }

    real item() const {
        check(numel() == 1, "Tensor::item: tensor is not a scalar");
        return node_->val[0];
    }

    // Value copy detached from the graph.
    Tensor detach() const;

    std::shared_ptr<TensorNode>& node() { return node_; }
    const std::shared_ptr<TensorNode>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
    friend Tensor make_op(std::vector<int> shape, std::vector<real> val,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backward);
};

// Builds an op-result tensor: wires parents and the backward closure, and
// registers it on the active tape when any parent needs gradients. The
// building block for every differentiable op, exposed so higher layers can
// add custom ops.
Tensor make_op(std::vector<int> shape, std::vector<real> val, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward);

// Records nodes in creation order while alive; backward() replays in reverse.
// Tapes nest; only the innermost records. Construct one per training step.
class GradTape {
public:
    GradTape();
    ~GradTape();
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    void backward(const Tensor& loss);

    static bool recording();
    static void record(const std::shared_ptr<TensorNode>& node);

private:
    GradTape* prev_ = nullptr;
    std::vector<std::shared_ptr<TensorNode>> order_;
};

// Disables recording while alive (inference, frozen submodules).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Shape helpers.
size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);
void check_same_shape(const Tensor& a, const Tensor& b, const std::string& op);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real c);
Tensor add_scalar(const Tensor& a, real c);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// ---- reductions / losses ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);
// Mean softmax cross-entropy over rows of logits [N, K] against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
// Mean binary cross-entropy with logits; targets same shape, values in [0, 1].
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// ---- linear algebra ----
// a [M, K] times b [K, N] -> [M, N]
Tensor matmul(const Tensor& a, const Tensor& b);
// a [M, K] times b^T with b [N, K] -> [M, N]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x [N, D], w [O, D], optional b [O] -> [N, O]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- shape ops ----
Tensor reshape(const Tensor& x, std::vector<int> shape);
// [N, C, H, W] -> [N, H*W, C]
Tensor nchw_to_tokens(const Tensor& x);
// [N, T, C] with T == h*w -> [N, C, h, w]
Tensor tokens_to_nchw(const Tensor& x, int h, int w);
// Concatenate along dim 1 for 3D token tensors [N, T, C].
Tensor concat_tokens(const Tensor& a, const Tensor& b);
// Rows [t0, t1) along dim 1 of [N, T, C].
Tensor slice_tokens(const Tensor& x, int t0, int t1);
// Concatenate along channel dim for [N, C, H, W].
Tensor concat_channels(const Tensor& a, const Tensor& b);
// Concatenate along the height axis: [N, C, Ha, W] + [N, C, Hb, W].
Tensor concat_height(const Tensor& a, const Tensor& b);

// ---- conv / norm / resampling ----
// x [N, C, H, W], w [O, C, kh, kw], optional bias [O].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  real eps = 1e-5);
Tensor upsample_nearest2x(const Tensor& x);
Tensor bilinear_resize(const Tensor& x, int oh, int ow);
Tensor adaptive_avg_pool(const Tensor& x, int oh, int ow);

// ---- attention / misc ----
// Softmax over the last dim of a 2D tensor [R, C].
Tensor softmax_rows(const Tensor& x);
// Batched a [N, T, D] times b [N, S, D]^T -> [N, T, S].
Tensor bmm_nt(const Tensor& a, const Tensor& b);
// Batched a [N, T, S] times b [N, S, D] -> [N, T, D].
Tensor bmm_nn(const Tensor& a, const Tensor& b);
// table [V, D] gathered by ids -> [ids.size(), D]
Tensor embed_rows(const Tensor& table, const std::vector<int>& ids);
// x [N, C, H, W] plus per-sample channel bias rows [N, C].
Tensor add_channel_rows(const Tensor& x, const Tensor& rows);
// x [N, C, H, W] plus per-channel bias [C].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
// f [N, C, h, w], mask m [N, 1, h, w] (values in [0,1], treated as constant),
// tokens vb, vf of shape [C]: f + vb*m + vf*(1-m).
Tensor mask_token_add(const Tensor& f, const Tensor& m, const Tensor& vb, const Tensor& vf);

} // namespace charpipe
