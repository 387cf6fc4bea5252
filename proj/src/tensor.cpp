#include "charpipe/tensor.hpp"

#include <sstream>

namespace charpipe {

namespace {
thread_local GradTape* g_tape = nullptr;
thread_local bool g_grad_enabled = true;
} // namespace

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        check(d > 0, "shape has non-positive dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const std::string& op) {
    if (a.shape() != b.shape()) {
        throw ValidationError(op + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    }
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->val.assign(shape_numel(t.node_->shape), 0.0);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(std::vector<int> shape, real value) {
    Tensor t = zeros(std::move(shape), false);
    for (real& v : t.val()) v = value;
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<real> data, bool requires_grad) {
    check(shape_numel(shape) == data.size(), "Tensor::from_data: size mismatch");
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->val = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(real v) { return from_data({1}, {v}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, real stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (real& v : t.val()) v = stddev * rng.normal();
    return t;
}

Tensor Tensor::detach() const {
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = node_->shape;
    t.node_->val = node_->val;
    t.node_->requires_grad = false;
    return t;
}

Tensor make_op(std::vector<int> shape, std::vector<real> val, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->val = std::move(val);
    bool needs = false;
    if (GradTape::recording()) {
        for (const Tensor& p : parents) {
            if (p.requires_grad()) {
                needs = true;
                break;
            }
        }
    }
    if (needs) {
        t.node_->requires_grad = true;
        t.node_->parents.reserve(parents.size());
        for (Tensor& p : parents) t.node_->parents.push_back(p.node());
        t.node_->backward = std::move(backward);
        GradTape::record(t.node_);
    }
    return t;
}

GradTape::GradTape() {
    prev_ = g_tape;
    g_tape = this;
}

GradTape::~GradTape() { g_tape = prev_; }

bool GradTape::recording() { return g_tape != nullptr && g_grad_enabled; }

void GradTape::record(const std::shared_ptr<TensorNode>& node) {
    if (g_tape) g_tape->order_.push_back(node);
}

void GradTape::backward(const Tensor& loss) {
    check(loss.defined() && loss.numel() == 1, "GradTape::backward: loss must be a scalar");
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        TensorNode& n = **it;
        if (!n.backward) continue;
        if (n.grad.size() != n.val.size()) continue; // no gradient reached this node
        n.backward(n);
        n.backward = nullptr;
    }
    order_.clear();
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

} // namespace charpipe
