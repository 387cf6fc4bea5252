#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "charpipe/nn.hpp"
#include "charpipe/tensor.hpp"

namespace charpipe {

struct UNetConfig {
    int in_channels = 3;
    int out_channels = 3;
    int base_channels = 16;
    std::vector<int> channel_multipliers = {1, 2, 4};
    // Resolution levels (0 = full res) that get attention blocks. The mid
    // block always has attention.
    std::vector<int> attn_levels = {1, 2};
    int temb_dim = 64;
    int groups = 8;
    // Token dim for cross-attention conditioning; 0 builds none.
    int cond_dim = 0;

    int levels() const { return static_cast<int>(channel_multipliers.size()); }
    int channels_at(int level) const { return base_channels * channel_multipliers[level]; }
    void validate(int H, int W) const;
};

// One self-attention site: where reference features can be captured on the
// reference stream and concatenated on the denoising stream.
struct AttentionTap {
    std::string layer_id;
    int channels = 0;
    int h = 0;
    int w = 0;
};

struct UNetRunCtx {
    // Denoising stream: reference features to concatenate at each attention
    // site, keyed by layer id. Every site must be present; unknown keys and
    // shape mismatches are validation errors.
    const std::map<std::string, Tensor>* ref_taps = nullptr;
    // Reference stream: captures the (post-injection) attention input per site.
    std::map<std::string, Tensor>* tap_out = nullptr;
    // Reference stream: additive feature modulation applied to the attention
    // input before capture. Returns the modified tensor.
    std::function<Tensor(const std::string& layer_id, const Tensor& x)> pre_attn_inject;
    // Added to the stem output (pose guider path). Shape [N, C0, H, W].
    Tensor stem_add;
    // Cross-attention token sets; text_tokens is required when cond_dim > 0.
    Tensor text_tokens; // [N, P, cond_dim]
    Tensor ref_tokens;  // [N, K, cond_dim]
};

class UNet {
public:
    UNet(UNetConfig cfg, ParamStore& ps, std::string prefix);

    // x [N, in_channels, H, W], one timestep per sample.
    Tensor forward(const Tensor& x, const std::vector<int>& ts, const UNetRunCtx& ctx) const;

    // Attention sites in forward order for an input of size (H, W).
    std::vector<AttentionTap> attention_taps(int H, int W) const;
    std::vector<std::string> attn_layer_ids() const;

    // Runs the self-attention block at layer_id on f_d, with keys/values over
    // the concatenation of f_d and f_ref along the first spatial axis. Pass an
    // undefined f_ref for plain self-attention.
    Tensor self_attention_at(const std::string& layer_id, const Tensor& f_d,
                             const Tensor& f_ref) const;

    const UNetConfig& config() const { return cfg_; }
    const std::string& prefix() const { return prefix_; }

private:
    struct ResBlock {
        GroupNormLayer gn1, gn2;
        Conv2dLayer conv1, conv2;
        LinearLayer temb_proj;
        Conv2dLayer skip; // 1x1, only when channel count changes
        bool has_skip = false;
        Tensor forward(const Tensor& x, const Tensor& temb) const;
    };
    struct SelfAttn {
        std::string id;
        GroupNormLayer gn;
        Tensor wq, wk, wv, wo;
        int channels = 0;
        Tensor forward(const Tensor& x, const Tensor& ref) const;
    };
    struct CrossAttn {
        std::string id;
        GroupNormLayer gn;
        Tensor wq, wkt, wvt, wkr, wvr, wo;
        int channels = 0;
        // ref_tokens may be undefined; the reference branch is skipped.
        Tensor forward(const Tensor& x, const Tensor& text_tokens,
                       const Tensor& ref_tokens) const;
    };

    Tensor run_attn_site(const SelfAttn& sa, const CrossAttn* ca, const Tensor& x,
                         const UNetRunCtx& ctx) const;
    const SelfAttn* find_attn(const std::string& layer_id) const;

    UNetConfig cfg_;
    std::string prefix_;
    Conv2dLayer stem_;
    LinearLayer temb_l1_, temb_l2_;
    std::vector<ResBlock> down_res_;
    std::vector<std::optional<SelfAttn>> down_attn_;
    std::vector<std::optional<CrossAttn>> down_xattn_;
    std::vector<Conv2dLayer> downsample_;
    ResBlock mid_res1_, mid_res2_;
    SelfAttn mid_attn_;
    std::optional<CrossAttn> mid_xattn_;
    std::vector<ResBlock> up_res_;
    std::vector<std::optional<SelfAttn>> up_attn_;
    std::vector<std::optional<CrossAttn>> up_xattn_;
    std::vector<Conv2dLayer> upsample_;
    GroupNormLayer head_gn_;
    Conv2dLayer head_conv_;
};

// Validated public entry point for conditioned denoising. Recognized
// injection keys: "stem.pose" (stem-level feature map), "text_tokens",
// "ref_tokens", and "ref:<attn_layer_id>" for per-site reference features.
// Unknown keys raise ValidationError.
Tensor denoiser_forward(const UNet& unet, const Tensor& z_t, int t,
                        const std::map<std::string, Tensor>& injections);

} // namespace charpipe
