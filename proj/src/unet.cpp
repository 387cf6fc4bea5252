#include "charpipe/unet.hpp"

#include <cmath>
#include <set>

namespace charpipe {

void UNetConfig::validate(int H, int W) const {
    check(in_channels > 0 && out_channels > 0, "UNetConfig: channel counts must be positive");
    check(base_channels > 0, "UNetConfig: base_channels must be positive");
    check(!channel_multipliers.empty(), "UNetConfig: need at least one level");
    check(temb_dim >= 4 && temb_dim % 2 == 0, "UNetConfig: temb_dim must be even and >= 4");
    check(cond_dim >= 0, "UNetConfig: cond_dim must be >= 0");
    int L = levels();
    for (int lvl : attn_levels) {
        check(lvl >= 0 && lvl < L, "UNetConfig: attn level out of range");
    }
    for (int i = 0; i < L; ++i) {
        int c = channels_at(i);
        check(c % groups == 0, "UNetConfig: channels at level " + std::to_string(i) +
                                   " not divisible by groups");
    }
    int div = 1 << (L - 1);
    check(H % div == 0 && W % div == 0,
          "UNetConfig: input " + std::to_string(H) + "x" + std::to_string(W) +
              " not divisible by " + std::to_string(div));
    check((H / div) >= 2 && (W / div) >= 2, "UNetConfig: input too small for depth");
}

namespace {

bool level_has_attn(const UNetConfig& cfg, int level) {
    for (int l : cfg.attn_levels)
        if (l == level) return true;
    return false;
}

Tensor sinusoid_embedding(const std::vector<int>& ts, int dim) {
    int N = static_cast<int>(ts.size());
    int half = dim / 2;
    Tensor out = Tensor::zeros({N, dim});
    for (int n = 0; n < N; ++n) {
        for (int k = 0; k < half; ++k) {
            real freq = std::exp(-std::log(10000.0) * static_cast<real>(k) /
                                 static_cast<real>(half > 1 ? half - 1 : 1));
            real a = static_cast<real>(ts[n]) * freq;
            out.val()[static_cast<size_t>(n) * dim + k] = std::sin(a);
            out.val()[static_cast<size_t>(n) * dim + half + k] = std::cos(a);
        }
    }
    return out;
}

// Projects tokens [N, T, Din] with a [Dout, Din] weight -> [N, T, Dout].
Tensor proj_tokens(const Tensor& tokens, const Tensor& w) {
    int N = tokens.dim(0), T = tokens.dim(1), D = tokens.dim(2);
    Tensor flat = reshape(tokens, {N * T, D});
    Tensor y = linear(flat, w, Tensor());
    return reshape(y, {N, T, w.dim(0)});
}

Tensor softmax_lastdim3(const Tensor& x) {
    int N = x.dim(0), T = x.dim(1), S = x.dim(2);
    return reshape(softmax_rows(reshape(x, {N * T, S})), {N, T, S});
}

} // namespace

Tensor UNet::ResBlock::forward(const Tensor& x, const Tensor& temb) const {
    Tensor h = conv1(silu(gn1(x)));
    h = add_channel_rows(h, temb_proj(silu(temb)));
    h = conv2(silu(gn2(h)));
    Tensor sk = has_skip ? skip(x) : x;
    return add(sk, h);
}

Tensor UNet::SelfAttn::forward(const Tensor& x, const Tensor& ref) const {
    int C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(C == channels, "self-attention " + id + ": channel mismatch");
    Tensor z = x;
    if (ref.defined()) {
        check(ref.shape() == x.shape(), "self-attention " + id +
                                            ": reference feature shape " +
                                            shape_str(ref.shape()) + " does not match " +
                                            shape_str(x.shape()));
        z = concat_height(x, ref);
    }
    Tensor tokens = nchw_to_tokens(gn(z)); // [N, S, C]
    int T = H * W;
    Tensor k = proj_tokens(tokens, wk);
    Tensor v = proj_tokens(tokens, wv);
    Tensor qtok = ref.defined() ? slice_tokens(tokens, 0, T) : tokens;
    Tensor q = proj_tokens(qtok, wq);
    Tensor scores = scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<real>(C)));
    Tensor att = softmax_lastdim3(scores);
    Tensor o = proj_tokens(bmm_nn(att, v), wo);
    return add(x, tokens_to_nchw(o, H, W));
}

Tensor UNet::CrossAttn::forward(const Tensor& x, const Tensor& text_tokens,
                                const Tensor& ref_tokens) const {
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(C == channels, "cross-attention " + id + ": channel mismatch");
    check(text_tokens.defined() && text_tokens.ndim() == 3 && text_tokens.dim(0) == N,
          "cross-attention " + id + ": text tokens must be [N, P, cond_dim]");
    Tensor tokens = nchw_to_tokens(gn(x));
    Tensor q = proj_tokens(tokens, wq);
    real sc = 1.0 / std::sqrt(static_cast<real>(C));

    Tensor kt = proj_tokens(text_tokens, wkt);
    Tensor vt = proj_tokens(text_tokens, wvt);
    Tensor out = bmm_nn(softmax_lastdim3(scale(bmm_nt(q, kt), sc)), vt);

    if (ref_tokens.defined()) {
        check(ref_tokens.ndim() == 3 && ref_tokens.dim(0) == N &&
                  ref_tokens.dim(2) == text_tokens.dim(2),
              "cross-attention " + id + ": reference tokens must be [N, K, cond_dim]");
        Tensor kr = proj_tokens(ref_tokens, wkr);
        Tensor vr = proj_tokens(ref_tokens, wvr);
        out = add(out, bmm_nn(softmax_lastdim3(scale(bmm_nt(q, kr), sc)), vr));
    }
    Tensor o = proj_tokens(out, wo);
    return add(x, tokens_to_nchw(o, H, W));
}

UNet::UNet(UNetConfig cfg, ParamStore& ps, std::string prefix)
    : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
    const int L = cfg_.levels();
    auto conv = [&](const std::string& name, int in, int out, int k, int s, int p,
                    Init init = Init::he_normal) {
        return make_conv(ps, prefix_ + name, in, out, k, s, p, init);
    };
    auto res = [&](const std::string& name, int in, int out) {
        ResBlock r;
        r.gn1 = make_group_norm(ps, prefix_ + name + ".gn1", in, cfg_.groups);
        r.conv1 = conv(name + ".conv1", in, out, 3, 1, 1);
        r.temb_proj = make_linear(ps, prefix_ + name + ".temb", cfg_.temb_dim, out);
        r.gn2 = make_group_norm(ps, prefix_ + name + ".gn2", out, cfg_.groups);
        r.conv2 = conv(name + ".conv2", out, out, 3, 1, 1);
        r.has_skip = in != out;
        if (r.has_skip) r.skip = conv(name + ".skip", in, out, 1, 1, 0);
        return r;
    };
    auto self_attn = [&](const std::string& id, int ch) {
        SelfAttn a;
        a.id = id;
        a.channels = ch;
        a.gn = make_group_norm(ps, prefix_ + id + ".gn", ch, cfg_.groups);
        a.wq = ps.create(prefix_ + id + ".q.w", {ch, ch}, Init::he_normal, ch);
        a.wk = ps.create(prefix_ + id + ".k.w", {ch, ch}, Init::he_normal, ch);
        a.wv = ps.create(prefix_ + id + ".v.w", {ch, ch}, Init::he_normal, ch);
        a.wo = ps.create(prefix_ + id + ".o.w", {ch, ch}, Init::zeros);
        return a;
    };
    auto cross_attn = [&](const std::string& id, int ch) {
        CrossAttn a;
        a.id = id;
        a.channels = ch;
        a.gn = make_group_norm(ps, prefix_ + id + ".gn", ch, cfg_.groups);
        a.wq = ps.create(prefix_ + id + ".q.w", {ch, ch}, Init::he_normal, ch);
        a.wkt = ps.create(prefix_ + id + ".kt.w", {ch, cfg_.cond_dim}, Init::he_normal,
                          cfg_.cond_dim);
        a.wvt = ps.create(prefix_ + id + ".vt.w", {ch, cfg_.cond_dim}, Init::he_normal,
                          cfg_.cond_dim);
        // Reference projections start at zero so an untouched reference branch
        // leaves the network's function unchanged.
        a.wkr = ps.create(prefix_ + id + ".kr.w", {ch, cfg_.cond_dim}, Init::zeros);
        a.wvr = ps.create(prefix_ + id + ".vr.w", {ch, cfg_.cond_dim}, Init::zeros);
        a.wo = ps.create(prefix_ + id + ".o.w", {ch, ch}, Init::zeros);
        return a;
    };

    stem_ = conv("stem", cfg_.in_channels, cfg_.channels_at(0), 3, 1, 1);
    temb_l1_ = make_linear(ps, prefix_ + "temb.l1", cfg_.temb_dim, cfg_.temb_dim);
    temb_l2_ = make_linear(ps, prefix_ + "temb.l2", cfg_.temb_dim, cfg_.temb_dim);

    down_res_.reserve(L);
    down_attn_.resize(L);
    down_xattn_.resize(L);
    for (int i = 0; i < L; ++i) {
        int ch = cfg_.channels_at(i);
        down_res_.push_back(res("down" + std::to_string(i) + ".res", ch, ch));
        if (level_has_attn(cfg_, i)) {
            std::string id = "down" + std::to_string(i);
            down_attn_[i] = self_attn(id + ".attn", ch);
            if (cfg_.cond_dim > 0) down_xattn_[i] = cross_attn(id + ".xattn", ch);
        }
        if (i < L - 1) {
            downsample_.push_back(
                conv("down" + std::to_string(i) + ".down", ch, cfg_.channels_at(i + 1), 3, 2, 1));
        }
    }

    int chL = cfg_.channels_at(L - 1);
    mid_res1_ = res("mid.res1", chL, chL);
    mid_attn_ = self_attn("mid.attn", chL);
    if (cfg_.cond_dim > 0) mid_xattn_ = cross_attn("mid.xattn", chL);
    mid_res2_ = res("mid.res2", chL, chL);

    up_res_.resize(L);
    up_attn_.resize(L);
    up_xattn_.resize(L);
    upsample_.resize(L > 1 ? L - 1 : 0);
    for (int i = L - 1; i >= 0; --i) {
        int ch = cfg_.channels_at(i);
        up_res_[i] = res("up" + std::to_string(i) + ".res", 2 * ch, ch);
        if (level_has_attn(cfg_, i)) {
            std::string id = "up" + std::to_string(i);
            up_attn_[i] = self_attn(id + ".attn", ch);
            if (cfg_.cond_dim > 0) up_xattn_[i] = cross_attn(id + ".xattn", ch);
        }
        if (i > 0) {
            upsample_[i - 1] =
                conv("up" + std::to_string(i) + ".up", ch, cfg_.channels_at(i - 1), 3, 1, 1);
        }
    }

    head_gn_ = make_group_norm(ps, prefix_ + "head.gn", cfg_.channels_at(0), cfg_.groups);
    // Zero-initialized head: the untrained network is the zero function.
    head_conv_ = conv("head.conv", cfg_.channels_at(0), cfg_.out_channels, 3, 1, 1, Init::zeros);
}

std::vector<AttentionTap> UNet::attention_taps(int H, int W) const {
    cfg_.validate(H, W);
    std::vector<AttentionTap> taps;
    int L = cfg_.levels();
    for (int i = 0; i < L; ++i) {
        if (down_attn_[i]) {
            taps.push_back({"down" + std::to_string(i) + ".attn", cfg_.channels_at(i), H >> i,
                            W >> i});
        }
    }
    taps.push_back({"mid.attn", cfg_.channels_at(L - 1), H >> (L - 1), W >> (L - 1)});
    for (int i = L - 1; i >= 0; --i) {
        if (up_attn_[i]) {
            taps.push_back({"up" + std::to_string(i) + ".attn", cfg_.channels_at(i), H >> i,
                            W >> i});
        }
    }
    return taps;
}

std::vector<std::string> UNet::attn_layer_ids() const {
    std::vector<std::string> ids;
    int L = cfg_.levels();
    for (int i = 0; i < L; ++i)
        if (down_attn_[i]) ids.push_back(down_attn_[i]->id);
    ids.push_back(mid_attn_.id);
    for (int i = L - 1; i >= 0; --i)
        if (up_attn_[i]) ids.push_back(up_attn_[i]->id);
    return ids;
}

const UNet::SelfAttn* UNet::find_attn(const std::string& layer_id) const {
    for (const auto& a : down_attn_)
        if (a && a->id == layer_id) return &*a;
    if (mid_attn_.id == layer_id) return &mid_attn_;
    for (const auto& a : up_attn_)
        if (a && a->id == layer_id) return &*a;
    return nullptr;
}

Tensor UNet::self_attention_at(const std::string& layer_id, const Tensor& f_d,
                               const Tensor& f_ref) const {
    const SelfAttn* sa = find_attn(layer_id);
    if (!sa) throw ValidationError("self_attention_at: unknown attention layer " + layer_id);
    check(f_d.ndim() == 4, "self_attention_at: feature must be [N, C, h, w]");
    return sa->forward(f_d, f_ref);
}

Tensor UNet::run_attn_site(const SelfAttn& sa, const CrossAttn* ca, const Tensor& x,
                           const UNetRunCtx& ctx) const {
    Tensor cur = x;
    if (ctx.pre_attn_inject) cur = ctx.pre_attn_inject(sa.id, cur);
    if (ctx.tap_out) (*ctx.tap_out)[sa.id] = cur;
    Tensor ref;
    if (ctx.ref_taps) {
        auto it = ctx.ref_taps->find(sa.id);
        if (it == ctx.ref_taps->end()) {
            throw ValidationError("denoiser: missing reference feature for site " + sa.id);
        }
        ref = it->second;
    }
    cur = sa.forward(cur, ref);
    if (ca) cur = ca->forward(cur, ctx.text_tokens, ctx.ref_tokens);
    return cur;
}

Tensor UNet::forward(const Tensor& x, const std::vector<int>& ts, const UNetRunCtx& ctx) const {
    check(x.ndim() == 4, "UNet::forward: input must be [N, C, H, W]");
    int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    check(x.dim(1) == cfg_.in_channels, "UNet::forward: expected " +
                                            std::to_string(cfg_.in_channels) + " channels, got " +
                                            std::to_string(x.dim(1)));
    check(static_cast<int>(ts.size()) == N, "UNet::forward: one timestep per sample");
    cfg_.validate(H, W);
    if (ctx.ref_taps) {
        // Reject unknown feature keys up front.
        std::set<std::string> ids;
        for (const std::string& id : attn_layer_ids()) ids.insert(id);
        for (const auto& [key, t] : *ctx.ref_taps) {
            if (!ids.count(key)) {
                throw ValidationError("denoiser: unknown reference feature key " + key);
            }
        }
    }
    bool has_xattn = cfg_.cond_dim > 0;
    if (has_xattn) {
        check(ctx.text_tokens.defined(),
              "UNet::forward: text tokens required when cross-attention is enabled");
    } else {
        check(!ctx.text_tokens.defined() && !ctx.ref_tokens.defined(),
              "UNet::forward: conditioning tokens passed to an unconditioned network");
    }

    Tensor temb = temb_l2_(silu(temb_l1_(sinusoid_embedding(ts, cfg_.temb_dim))));

    Tensor h = stem_(x);
    if (ctx.stem_add.defined()) {
        check(ctx.stem_add.shape() == h.shape(),
              "UNet::forward: stem injection shape " + shape_str(ctx.stem_add.shape()) +
                  " does not match stem output " + shape_str(h.shape()));
        h = add(h, ctx.stem_add);
    }

    int L = cfg_.levels();
    std::vector<Tensor> skips(L);
    for (int i = 0; i < L; ++i) {
        h = down_res_[i].forward(h, temb);
        if (down_attn_[i]) {
            h = run_attn_site(*down_attn_[i], down_xattn_[i] ? &*down_xattn_[i] : nullptr, h,
                              ctx);
        }
        skips[i] = h;
        if (i < L - 1) h = downsample_[i](h);
    }

    h = mid_res1_.forward(h, temb);
    h = run_attn_site(mid_attn_, mid_xattn_ ? &*mid_xattn_ : nullptr, h, ctx);
    h = mid_res2_.forward(h, temb);

    for (int i = L - 1; i >= 0; --i) {
        h = concat_channels(h, skips[i]);
        h = up_res_[i].forward(h, temb);
        if (up_attn_[i]) {
            h = run_attn_site(*up_attn_[i], up_xattn_[i] ? &*up_xattn_[i] : nullptr, h, ctx);
        }
        if (i > 0) h = upsample_[i - 1](upsample_nearest2x(h));
    }

    return head_conv_(silu(head_gn_(h)));
}

Tensor denoiser_forward(const UNet& unet, const Tensor& z_t, int t,
                        const std::map<std::string, Tensor>& injections) {
    check(z_t.ndim() == 4, "denoiser_forward: z_t must be [N, C, H, W]");
    check(t >= 0, "denoiser_forward: t must be >= 0");
    std::set<std::string> attn_ids;
    for (const std::string& id : unet.attn_layer_ids()) attn_ids.insert(id);

    UNetRunCtx ctx;
    std::map<std::string, Tensor> ref_taps;
    for (const auto& [key, tensor] : injections) {
        if (key == "stem.pose") {
            ctx.stem_add = tensor;
        } else if (key == "text_tokens") {
            ctx.text_tokens = tensor;
        } else if (key == "ref_tokens") {
            ctx.ref_tokens = tensor;
        } else if (key.rfind("ref:", 0) == 0) {
            std::string id = key.substr(4);
            check(attn_ids.count(id) > 0, "denoiser_forward: unknown injection key " + key);
            ref_taps[id] = tensor;
        } else {
            throw ValidationError("denoiser_forward: unknown injection key " + key);
        }
    }
    if (!ref_taps.empty()) {
        check(ref_taps.size() == attn_ids.size(),
              "denoiser_forward: reference features must cover every attention site");
        ctx.ref_taps = &ref_taps;
    }
    std::vector<int> ts(static_cast<size_t>(z_t.dim(0)), t);
    return unet.forward(z_t, ts, ctx);
}

} // namespace charpipe
