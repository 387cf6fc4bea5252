#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "charpipe/image.hpp"
#include "charpipe/rng.hpp"
#include "charpipe/tensor.hpp"

namespace charpipe {

enum class Init { zeros, ones, he_normal, normal_small };

// Named parameter registry. Initialization is a pure function of the store's
// seed and the parameter name, so two models that share a subset of names get
// bit-identical weights for that subset regardless of what else they own.
class ParamStore {
public:
    ParamStore() : seed_(0) {}
    explicit ParamStore(uint64_t seed) : seed_(seed) {}

    // Creates (or returns the existing) parameter. fan_in scales he_normal.
    Tensor create(const std::string& name, std::vector<int> shape, Init init, int fan_in = 0);
    Tensor get(const std::string& name) const;
    bool has(const std::string& name) const;
    void put(const std::string& name, Tensor t);

    // Sorted by name; iteration order is deterministic.
    const std::map<std::string, Tensor>& all() const { return params_; }
    std::map<std::string, Tensor>& all() { return params_; }

    void set_trainable_all(bool trainable);
    // Marks parameters whose name starts with prefix.
    void set_trainable_prefix(const std::string& prefix, bool trainable);
    std::vector<std::string> trainable_names() const;
    size_t total_elements() const;
    uint64_t seed() const { return seed_; }
    void set_seed(uint64_t s) { seed_ = s; }

    // SHA-256 over sorted (name, shape, raw value bytes); used for the
    // frozen-parameter contract. include: names starting with prefix (empty
    // matches all); exclude: exact names to skip.
    std::string content_hash(const std::string& prefix = "",
                             const std::set<std::string>& exclude = {}) const;

private:
    uint64_t seed_;
    std::map<std::string, Tensor> params_;
};

// ---- layers ----

struct Conv2dLayer {
    Tensor w, b;
    int stride = 1, pad = 0;
    Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};
// bias=false builds a bias-free conv.
Conv2dLayer make_conv(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k,
                      int stride, int pad, Init init = Init::he_normal, bool bias = true);

struct LinearLayer {
    Tensor w, b;
    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};
LinearLayer make_linear(ParamStore& ps, const std::string& name, int in_dim, int out_dim,
                        Init init = Init::he_normal, bool bias = true);

struct GroupNormLayer {
    Tensor gamma, beta;
    int groups = 1;
    Tensor operator()(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }
};
GroupNormLayer make_group_norm(ParamStore& ps, const std::string& name, int channels,
                               int groups);

// ---- optimizer ----

struct AdamConfig {
    real lr = 1e-3;
    real beta1 = 0.9;
    real beta2 = 0.999;
    real eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    // Applies one update to every trainable parameter in the store, then
    // clears their gradients. Parameters are visited in name order.
    void step(ParamStore& ps);
    int64_t steps_taken() const { return t_; }
    AdamConfig& config() { return cfg_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::map<std::string, std::pair<std::vector<real>, std::vector<real>>> moments_;
};

// ---- host <-> tensor conversion ----

// Stacks images into [N, C, H, W]. signed_range maps [0,1] to [-1,1].
Tensor images_to_tensor(const std::vector<const Image*>& batch, bool signed_range);
Tensor image_to_tensor(const Image& img, bool signed_range);
// Extracts sample n of a [N, C, H, W] tensor; clamps to the valid range.
Image tensor_to_image(const Tensor& t, int n, bool signed_range);

} // namespace charpipe
