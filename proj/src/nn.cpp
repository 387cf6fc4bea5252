#include "charpipe/nn.hpp"

#include <cmath>
#include <cstring>

#include "charpipe/hashing.hpp"

namespace charpipe {

Tensor ParamStore::create(const std::string& name, std::vector<int> shape, Init init,
                          int fan_in) {
    auto it = params_.find(name);
    if (it != params_.end()) {
        check(it->second.shape() == shape, "ParamStore::create: shape conflict for " + name);
        return it->second;
    }
    Tensor t = Tensor::zeros(shape, true);
    switch (init) {
        case Init::zeros:
            break;
        case Init::ones:
            for (real& v : t.val()) v = 1.0;
            break;
        case Init::he_normal: {
            check(fan_in > 0, "ParamStore::create: he_normal needs fan_in for " + name);
            Rng r = Rng(seed_).fork("param:" + name);
            real std = std::sqrt(2.0 / static_cast<real>(fan_in));
            for (real& v : t.val()) v = std * r.normal();
            break;
        }
        case Init::normal_small: {
            Rng r = Rng(seed_).fork("param:" + name);
            for (real& v : t.val()) v = 0.02 * r.normal();
            break;
        }
    }
    t.zero_grad();
    params_.emplace(name, t);
    return t;
}

Tensor ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    check(it != params_.end(), "ParamStore::get: unknown parameter " + name);
    return it->second;
}

bool ParamStore::has(const std::string& name) const { return params_.count(name) > 0; }

void ParamStore::put(const std::string& name, Tensor t) {
    t.zero_grad();
    params_[name] = std::move(t);
}

void ParamStore::set_trainable_all(bool trainable) {
    for (auto& [name, t] : params_) t.set_requires_grad(trainable);
}

void ParamStore::set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (auto& [name, t] : params_) {
        if (name.rfind(prefix, 0) == 0) t.set_requires_grad(trainable);
    }
}

std::vector<std::string> ParamStore::trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : params_) {
        if (t.requires_grad()) out.push_back(name);
    }
    return out;
}

size_t ParamStore::total_elements() const {
    size_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
}

std::string ParamStore::content_hash(const std::string& prefix,
                                     const std::set<std::string>& exclude) const {
    Sha256Stream sha;
    for (const auto& [name, t] : params_) {
        if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
        if (exclude.count(name)) continue;
        sha.update(name);
        for (int d : t.shape()) {
            int32_t v = d;
            sha.update(&v, sizeof(v));
        }
        sha.update(t.val().data(), t.val().size() * sizeof(real));
    }
    return sha.hex();
}

Conv2dLayer make_conv(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k,
                      int stride, int pad, Init init, bool bias) {
    Conv2dLayer l;
    l.w = ps.create(name + ".w", {out_ch, in_ch, k, k}, init, in_ch * k * k);
    if (bias) l.b = ps.create(name + ".b", {out_ch}, Init::zeros);
    l.stride = stride;
    l.pad = pad;
    return l;
}

LinearLayer make_linear(ParamStore& ps, const std::string& name, int in_dim, int out_dim,
                        Init init, bool bias) {
    LinearLayer l;
    l.w = ps.create(name + ".w", {out_dim, in_dim}, init, in_dim);
    if (bias) l.b = ps.create(name + ".b", {out_dim}, Init::zeros);
    return l;
}

GroupNormLayer make_group_norm(ParamStore& ps, const std::string& name, int channels,
                               int groups) {
    GroupNormLayer l;
    l.gamma = ps.create(name + ".gamma", {channels}, Init::ones);
    l.beta = ps.create(name + ".beta", {channels}, Init::zeros);
    l.groups = groups;
    return l;
}

void Adam::step(ParamStore& ps) {
    ++t_;
    real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<real>(t_));
    real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<real>(t_));
    for (auto& [name, p] : ps.all()) {
        if (!p.requires_grad()) continue;
        if (p.grad().size() != p.numel()) p.zero_grad();
        auto& [m, v] = moments_[name];
        if (m.size() != p.numel()) {
            m.assign(p.numel(), 0.0);
            v.assign(p.numel(), 0.0);
        }
        real* pv = p.val().data();
        real* pg = p.grad().data();
        for (size_t i = 0; i < p.numel(); ++i) {
            real g = pg[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            real mhat = m[i] / bc1;
            real vhat = v[i] / bc2;
            pv[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        p.zero_grad();
    }
}

Tensor images_to_tensor(const std::vector<const Image*>& batch, bool signed_range) {
    check(!batch.empty(), "images_to_tensor: empty batch");
    const Image& first = *batch[0];
    int N = static_cast<int>(batch.size());
    int C = first.channels, H = first.height, W = first.width;
    Tensor t = Tensor::zeros({N, C, H, W});
    for (int n = 0; n < N; ++n) {
        const Image& img = *batch[n];
        check(img.same_shape(first), "images_to_tensor: mixed shapes in batch");
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    real v = static_cast<real>(img.at(y, x, c));
                    if (signed_range) v = 2.0 * v - 1.0;
                    t.val()[((static_cast<size_t>(n) * C + c) * H + y) * W + x] = v;
                }
    }
    return t;
}

Tensor image_to_tensor(const Image& img, bool signed_range) {
    return images_to_tensor({&img}, signed_range);
}

Image tensor_to_image(const Tensor& t, int n, bool signed_range) {
    check(t.ndim() == 4, "tensor_to_image: tensor must be [N, C, H, W]");
    check(n >= 0 && n < t.dim(0), "tensor_to_image: sample index out of range");
    int C = t.dim(1), H = t.dim(2), W = t.dim(3);
    Image img(H, W, C);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                real v = t.val()[((static_cast<size_t>(n) * C + c) * H + y) * W + x];
                if (signed_range) v = (v + 1.0) * 0.5;
                if (v < 0.0) v = 0.0;
                if (v > 1.0) v = 1.0;
                img.at(y, x, c) = static_cast<float>(v);
            }
    return img;
}

} // namespace charpipe
