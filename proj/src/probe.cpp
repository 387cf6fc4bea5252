#include "charpipe/probe.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "charpipe/checkpoint.hpp"

namespace charpipe {

namespace {

constexpr const char* kPrefix = "probe.";

int groups_for(int channels, int preferred) {
    if (channels % preferred == 0) return preferred;
    if (channels % 4 == 0) return 4;
    return 1;
}

// Rows of a [N, K] matrix selected by index; backward scatters.
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    check(x.ndim() == 2, "gather_rows: expected [N, K]");
    int k = x.dim(1);
    std::vector<real> out(rows.size() * static_cast<size_t>(k));
    for (size_t r = 0; r < rows.size(); ++r)
        for (int j = 0; j < k; ++j)
            out[r * k + j] = x.val()[static_cast<size_t>(rows[r]) * k + j];
    return make_op({static_cast<int>(rows.size()), k}, std::move(out), {x},
                   [rows, k](TensorNode& n) {
                       TensorNode& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (size_t r = 0; r < rows.size(); ++r)
                           for (int j = 0; j < k; ++j)
                               p.grad[static_cast<size_t>(rows[r]) * k + j] +=
                                   n.grad[r * k + j];
                   });
}

json probe_config_to_json(const ProbeConfig& c) {
    return {{"height", c.height},       {"width", c.width},
            {"base", c.base},           {"groups", c.groups},
            {"epochs", c.epochs},       {"min_epochs", c.min_epochs},
            {"batch", c.batch},         {"lr", c.lr},
            {"seed", c.seed},           {"gate_accuracy", c.gate_accuracy},
            {"gate_fg_iou", c.gate_fg_iou}, {"gate_head_iou", c.gate_head_iou},
            {"aug_whiten", c.aug_whiten},   {"aug_noise", c.aug_noise},
            {"noise_sigma", c.noise_sigma}, {"aug_shift", c.aug_shift},
            {"aug_bright", c.aug_bright},   {"aug_resample", c.aug_resample}};
}

ProbeConfig probe_config_from_json(const json& j) {
    ProbeConfig c;
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
    c.base = j.at("base").get<int>();
    c.groups = j.at("groups").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.min_epochs = j.at("min_epochs").get<int>();
    c.batch = j.at("batch").get<int>();
    c.lr = j.at("lr").get<real>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.gate_accuracy = j.at("gate_accuracy").get<real>();
    c.gate_fg_iou = j.at("gate_fg_iou").get<real>();
    c.gate_head_iou = j.at("gate_head_iou").get<real>();
    c.aug_whiten = j.at("aug_whiten").get<real>();
    c.aug_noise = j.at("aug_noise").get<real>();
    c.noise_sigma = j.at("noise_sigma").get<real>();
    c.aug_shift = j.at("aug_shift").get<int>();
    c.aug_bright = j.at("aug_bright").get<real>();
    c.aug_resample = j.at("aug_resample").get<real>();
    return c;
}

} // namespace

json probe_eval_to_json(const ProbeEval& e) {
    json acc = json::object(), n = json::object();
    for (const auto& [k, v] : e.head_accuracy) acc[k] = v;
    for (const auto& [k, v] : e.head_n) n[k] = v;
    return {{"head_accuracy", acc},
            {"head_n", n},
            {"fg_iou", e.fg_iou},
            {"head_iou", e.head_iou},
            {"n", e.n}};
}

ProbeEval probe_eval_from_json(const json& j) {
    ProbeEval e;
    for (const auto& [k, v] : j.at("head_accuracy").items())
        e.head_accuracy[k] = v.get<real>();
    for (const auto& [k, v] : j.at("head_n").items()) e.head_n[k] = v.get<int>();
    e.fg_iou = j.at("fg_iou").get<real>();
    e.head_iou = j.at("head_iou").get<real>();
    e.n = j.at("n").get<int>();
    return e;
}

const std::vector<ProbeHead>& probe_heads() {
    static const std::vector<ProbeHead> heads = {
        {"hair_color", kHairColors}, {"hair_style", kHairStyles},
        {"skin_tone", kSkinTones},   {"top_color", kTopColors},
        {"top_pattern", kTopPatterns}, {"bottom_color", kBottomColors},
        {"accessory", kAccessories}, {"pose", kPoses},
        {"background", kBackgrounds}, {"expression", kExpressions},
        {"scale", kScales},          {"flip", 2},
        {"crop", kCropModes},        {"domain", 2},
    };
    return heads;
}

const std::vector<std::string>& appearance_head_names() {
    static const std::vector<std::string> names = {
        "hair_color", "hair_style", "skin_tone",  "top_color",
        "top_pattern", "bottom_color", "accessory"};
    return names;
}

// Heads whose target is where the figure sits rather than what it looks
// like; only these read the flattened deep map.
static bool layout_head(const std::string& head) {
    static const std::set<std::string> names = {"pose", "scale", "crop", "flip"};
    return names.count(head) > 0;
}

bool head_visible_in(const std::string& head, CropMode crop) {
    if (crop == CropMode::full) return true;
    if (head == "bottom_color") return false;  // legs leave the frame
    if (crop == CropMode::upper) return true;
    // head-only crop: torso, limbs, and overall framing are gone
    static const std::set<std::string> head_crop_ok = {
        "hair_color", "hair_style", "skin_tone", "expression",
        "flip",       "background", "crop",      "domain"};
    return head_crop_ok.count(head) > 0;
}

void ProbeConfig::validate() const {
    check(height >= 32 && width >= 32, "probe: resolution must be at least 32x32");
    check(height % 8 == 0 && width % 8 == 0,
          "probe: resolution must be a multiple of 8 for the segmentation decoder");
    check(base >= 8 && base % 2 == 0, "probe: base width must be even and >= 8");
    check(epochs >= 1 && min_epochs >= 1 && batch >= 1, "probe: bad training sizes");
    check(lr > 0, "probe: lr must be positive");
    check(gate_accuracy > 0 && gate_accuracy <= 1, "probe: bad gate_accuracy");
    check(aug_resample >= 0 && aug_resample <= 1, "probe: bad aug_resample");
}

std::map<std::string, int> character_labels(const CharacterSpec& ch) {
    return {{"hair_color", ch.hair_color},   {"hair_style", ch.hair_style},
            {"skin_tone", ch.skin_tone},     {"top_color", ch.top_color},
            {"top_pattern", ch.top_pattern}, {"bottom_color", ch.bottom_color},
            {"accessory", ch.accessory}};
}

ProbeSample probe_sample_from_render(const RenderedSample& r) {
    ProbeSample s;
    s.image = r.image;
    int H = r.height, W = r.width;
    s.fg_mask = Image(H, W, 1);
    s.head_mask = Image(H, W, 1);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            Part p = r.part_at(y, x);
            s.fg_mask.at(y, x, 0) = p == Part::bg ? 0.0f : 1.0f;
            bool head = p == Part::head || p == Part::hair || p == Part::face;
            s.head_mask.at(y, x, 0) = head ? 1.0f : 0.0f;
        }
    }
    s.labels = character_labels(r.character);
    s.labels["pose"] = r.scene.pose_id;
    s.labels["background"] = r.scene.background_id;
    s.labels["expression"] = r.scene.expression_id;
    s.labels["scale"] = r.scene.scale_id;
    s.labels["flip"] = r.scene.flip ? 1 : 0;
    s.labels["crop"] = static_cast<int>(r.scene.crop_mode);
    s.labels["domain"] = r.domain == Domain::styleB ? 1 : 0;
    return s;
}

std::vector<ProbeSample> render_probe_dataset(int n_chars, int scenes_per_char, int H,
                                              int W, std::uint64_t seed) {
    check(n_chars >= 1 && scenes_per_char >= 1, "render_probe_dataset: empty sizes");
    Rng root(seed);
    std::vector<ProbeSample> out;
    out.reserve(static_cast<size_t>(n_chars) * scenes_per_char);
    // Draw-until-unique keeps character identities disjoint, so an index
    // split of the output is a true held-out character split.
    Rng char_rng = root.fork("probe_chars");
    std::set<std::array<int, 7>> seen;
    for (int ci = 0; ci < n_chars; ++ci) {
        CharacterSpec ch;
        do {
            ch = random_character(char_rng);
        } while (!seen.insert({ch.hair_color, ch.hair_style, ch.skin_tone,
                               ch.top_color, ch.top_pattern, ch.bottom_color,
                               ch.accessory})
                      .second);
        for (int si = 0; si < scenes_per_char; ++si) {
            Rng sr = root.fork("probe_scene",
                               static_cast<std::uint64_t>(ci) * scenes_per_char + si);
            SceneSpec scene = sample_scene(sr, /*exclude_standard=*/false);
            Domain d = (ci + si) % 2 == 0 ? Domain::styleA : Domain::styleB;
            out.push_back(probe_sample_from_render(render(ch, scene, d, H, W)));
        }
    }
    return out;
}

AttributeProbe::AttributeProbe(const ProbeConfig& cfg) : cfg_(cfg), params_(cfg.seed) {
    cfg_.validate();
    int b = cfg_.base;
    auto conv = [&](const std::string& name, int ic, int oc, int k, int s) {
        make_conv(params_, std::string(kPrefix) + name, ic, oc, k, s, k / 2);
    };
    auto gn = [&](const std::string& name, int ch) {
        make_group_norm(params_, std::string(kPrefix) + name, ch,
                        groups_for(ch, cfg_.groups));
    };
    conv("c0", 3, 8, 3, 1);
    gn("g0", 8);
    conv("c1", 3, b, 3, 2);
    gn("g1", b);
    conv("c2", b, 2 * b, 3, 2);
    gn("g2", 2 * b);
    conv("c3", 2 * b, 4 * b, 3, 2);
    gn("g3", 4 * b);
    make_linear(params_, std::string(kPrefix) + "fc", 6 * b, 4 * b);
    conv("d2", 4 * b, b, 3, 1);
    gn("gd2", b);
    conv("d1", b, b / 2, 3, 1);
    gn("gd1", b / 2);
    conv("d0", b / 2 + 8, 2, 3, 1);
    // Each head reads soft spatial attention over the mid and deep maps
    // (part-local evidence such as leg color) plus the shared pooled
    // embedding. Layout heads additionally see the deep map flattened with
    // its geometry intact: pooling cannot represent factors like pose or
    // framing, while appearance heads would only memorize through it.
    int cells = (cfg_.height / 8) * (cfg_.width / 8);
    for (const ProbeHead& h : probe_heads()) {
        conv("head." + h.name + ".att2", 2 * b, 1, 1, 1);
        conv("head." + h.name + ".att3", 4 * b, 1, 1, 1);
        int in = 10 * b + (layout_head(h.name) ? 4 * b * cells : 0);
        make_linear(params_, std::string(kPrefix) + "head." + h.name, in, h.classes);
    }
}

AttributeProbe::Forward AttributeProbe::forward(const Tensor& x) const {
    check(x.ndim() == 4 && x.dim(1) == 3, "probe forward: expected [N, 3, H, W]");
    check(x.dim(2) % 8 == 0 && x.dim(3) % 8 == 0,
          "probe forward: H and W must be multiples of 8");
    const ParamStore& ps = params_;
    auto conv = [&](const Tensor& in, const std::string& name, int stride) {
        return conv2d(in, ps.get(std::string(kPrefix) + name + ".w"),
                      ps.get(std::string(kPrefix) + name + ".b"), stride, 1);
    };
    auto gn = [&](const Tensor& in, const std::string& name) {
        Tensor gamma = ps.get(std::string(kPrefix) + name + ".gamma");
        Tensor beta = ps.get(std::string(kPrefix) + name + ".beta");
        return group_norm(in, groups_for(in.dim(1), cfg_.groups), gamma, beta);
    };
    Tensor c0 = silu(gn(conv(x, "c0", 1), "g0"));
    Tensor c1 = silu(gn(conv(x, "c1", 2), "g1"));
    Tensor c2 = silu(gn(conv(c1, "c2", 2), "g2"));
    Tensor c3 = silu(gn(conv(c2, "c3", 2), "g3"));

    // Mid + deep pooled features through a shared hidden layer; the hidden
    // activation doubles as the embedding tap for the cosine metrics.
    int n = x.dim(0), b = cfg_.base;
    Tensor p2 = adaptive_avg_pool(c2, 1, 1);
    Tensor p3 = adaptive_avg_pool(c3, 1, 1);
    Tensor pooled = reshape(concat_channels(p2, p3), {n, 6 * b});
    Tensor emb = silu(linear(pooled, ps.get(std::string(kPrefix) + "fc.w"),
                             ps.get(std::string(kPrefix) + "fc.b")));

    // Soft-attention readout: collapse [N, C, h, w] to [N, C] under a learned
    // per-head spatial weighting.
    auto attend = [&](const Tensor& feat, const std::string& name) {
        Tensor logits = conv2d(feat, ps.get(std::string(kPrefix) + name + ".w"),
                               ps.get(std::string(kPrefix) + name + ".b"), 1, 0);
        int c = feat.dim(1), hw = feat.dim(2) * feat.dim(3);
        Tensor att = reshape(softmax_rows(reshape(logits, {n, hw})), {n, 1, hw});
        return reshape(bmm_nn(att, nchw_to_tokens(feat)), {n, c});
    };
    auto cat2d = [&](const Tensor& a2, const Tensor& b2) {
        Tensor a4 = reshape(a2, {n, a2.dim(1), 1, 1});
        Tensor b4 = reshape(b2, {n, b2.dim(1), 1, 1});
        return reshape(concat_channels(a4, b4), {n, a2.dim(1) + b2.dim(1)});
    };

    Forward f;
    f.pooled = emb;
    // Classification heads exist only at the configured resolution; the
    // trunk/decoder still run at any multiple of 8 (embedding of face crops).
    bool native = c3.dim(2) == cfg_.height / 8 && c3.dim(3) == cfg_.width / 8;
    if (native) {
        Tensor flat3 = reshape(c3, {n, 4 * b * (cfg_.height / 8) * (cfg_.width / 8)});
        for (const ProbeHead& h : probe_heads()) {
            Tensor a2 = attend(c2, "head." + h.name + ".att2");
            Tensor a3 = attend(c3, "head." + h.name + ".att3");
            Tensor feats = cat2d(cat2d(a2, a3), emb);
            if (layout_head(h.name)) feats = cat2d(feats, flat3);
            Tensor w = ps.get(std::string(kPrefix) + "head." + h.name + ".w");
            Tensor bb = ps.get(std::string(kPrefix) + "head." + h.name + ".b");
            f.head_logits[h.name] = linear(feats, w, bb);
        }
    }
    Tensor d2 = silu(gn(conv(upsample_nearest2x(c3), "d2", 1), "gd2"));
    Tensor d1 = silu(gn(conv(upsample_nearest2x(d2), "d1", 1), "gd1"));
    Tensor d0 = concat_channels(upsample_nearest2x(d1), c0);
    f.seg_logits = conv(d0, "d0", 1);
    return f;
}

std::map<std::string, int> AttributeProbe::classify(const Image& img) const {
    NoGradGuard ng;
    check(img.height == cfg_.height && img.width == cfg_.width,
          "classify: image must be at the probe resolution");
    Tensor x = image_to_tensor(img, /*signed_range=*/false);
    Forward f = forward(x);
    std::map<std::string, int> out;
    for (const auto& [name, logits] : f.head_logits) {
        const std::vector<real>& v = logits.val();
        int best = 0;
        for (int j = 1; j < logits.dim(1); ++j)
            if (v[static_cast<size_t>(j)] > v[static_cast<size_t>(best)]) best = j;
        out[name] = best;
    }
    return out;
}

std::vector<real> AttributeProbe::embedding(const Image& img) const {
    NoGradGuard ng;
    Tensor x = image_to_tensor(img, /*signed_range=*/false);
    Forward f = forward(x);
    return f.pooled.val();
}

Image AttributeProbe::predict_bg_mask(const Image& img) const {
    NoGradGuard ng;
    Tensor x = image_to_tensor(img, /*signed_range=*/false);
    Forward f = forward(x);
    int H = img.height, W = img.width;
    Image mask(H, W, 1);
    const std::vector<real>& v = f.seg_logits.val(); // [1, 2, H, W], channel 0 = figure
    for (int y = 0; y < H; ++y)
        for (int x2 = 0; x2 < W; ++x2)
            mask.at(y, x2, 0) =
                v[static_cast<size_t>(y) * W + x2] >= 0.0 ? 0.0f : 1.0f;
    return mask;
}

std::optional<CropBox> AttributeProbe::head_region(const Image& img) const {
    NoGradGuard ng;
    Tensor x = image_to_tensor(img, /*signed_range=*/false);
    Forward f = forward(x);
    int H = img.height, W = img.width;
    const std::vector<real>& v = f.seg_logits.val();
    size_t plane = static_cast<size_t>(H) * W; // channel 1 = head region
    int x0 = W, y0 = H, x1 = -1, y1 = -1;
    for (int y = 0; y < H; ++y) {
        for (int x2 = 0; x2 < W; ++x2) {
            if (v[plane + static_cast<size_t>(y) * W + x2] >= 0.0) {
                x0 = std::min(x0, x2);
                x1 = std::max(x1, x2);
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
            }
        }
    }
    if (x1 < 0) return std::nullopt;
    int pad = std::max(1, static_cast<int>(std::llround(
                              0.15 * std::max(x1 - x0 + 1, y1 - y0 + 1))));
    x0 = std::max(0, x0 - pad);
    y0 = std::max(0, y0 - pad);
    x1 = std::min(W - 1, x1 + pad);
    y1 = std::min(H - 1, y1 + pad);
    return CropBox{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

void AttributeProbe::save(const std::string& path) const {
    json extra = {{"kind", "attribute_probe"},
                  {"config", probe_config_to_json(cfg_)},
                  {"gated", gated_},
                  {"gate_eval", probe_eval_to_json(gate_eval_)}};
    save_checkpoint(path, params_, extra);
}

AttributeProbe AttributeProbe::load(const std::string& path) {
    LoadedCheckpoint lc = load_checkpoint(path);
    check(lc.header.contains("kind") && lc.header.at("kind") == "attribute_probe",
          "checkpoint at " + path + " is not an attribute probe");
    AttributeProbe probe(probe_config_from_json(lc.header.at("config")));
    for (auto& [name, t] : lc.params.all()) probe.params_.put(name, t);
    probe.gated_ = lc.header.at("gated").get<bool>();
    probe.gate_eval_ = probe_eval_from_json(lc.header.at("gate_eval"));
    return probe;
}

ProbeEval evaluate_probe(const AttributeProbe& probe,
                         const std::vector<ProbeSample>& samples) {
    check(!samples.empty(), "evaluate_probe: no samples");
    NoGradGuard ng;
    ProbeEval e;
    std::map<std::string, int> correct;
    for (const ProbeHead& h : probe_heads()) {
        correct[h.name] = 0;
        e.head_n[h.name] = 0;
    }
    double iou_sum = 0.0, head_iou_sum = 0.0;
    const int batch = 32;
    int H = probe.config().height, W = probe.config().width;
    for (size_t at = 0; at < samples.size(); at += batch) {
        size_t n = std::min(static_cast<size_t>(batch), samples.size() - at);
        std::vector<const Image*> imgs(n);
        for (size_t i = 0; i < n; ++i) {
            const Image& im = samples[at + i].image;
            check(im.height == H && im.width == W,
                  "evaluate_probe: sample resolution differs from probe config");
            imgs[i] = &im;
        }
        AttributeProbe::Forward f =
            probe.forward(images_to_tensor(imgs, /*signed_range=*/false));
        for (size_t i = 0; i < n; ++i) {
            const ProbeSample& s = samples[at + i];
            CropMode crop = static_cast<CropMode>(s.labels.at("crop"));
            for (const ProbeHead& h : probe_heads()) {
                if (!head_visible_in(h.name, crop)) continue;
                const Tensor& logits = f.head_logits.at(h.name);
                const std::vector<real>& v = logits.val();
                size_t row = i * static_cast<size_t>(h.classes);
                int best = 0;
                for (int j = 1; j < h.classes; ++j)
                    if (v[row + j] > v[row + best]) best = j;
                e.head_n[h.name] += 1;
                if (best == s.labels.at(h.name)) correct[h.name] += 1;
            }
            // IoU at threshold 0.5 (logit 0) per channel.
            const std::vector<real>& sv = f.seg_logits.val();
            size_t base = i * 2 * static_cast<size_t>(H) * W;
            long fg_i = 0, fg_u = 0, hd_i = 0, hd_u = 0;
            for (int p = 0; p < H * W; ++p) {
                bool pf = sv[base + p] >= 0.0;
                bool gf = s.fg_mask.data[static_cast<size_t>(p)] >= 0.5f;
                fg_i += pf && gf;
                fg_u += pf || gf;
                bool ph = sv[base + static_cast<size_t>(H) * W + p] >= 0.0;
                bool gh = s.head_mask.data[static_cast<size_t>(p)] >= 0.5f;
                hd_i += ph && gh;
                hd_u += ph || gh;
            }
            iou_sum += fg_u > 0 ? static_cast<double>(fg_i) / fg_u : 1.0;
            head_iou_sum += hd_u > 0 ? static_cast<double>(hd_i) / hd_u : 1.0;
        }
    }
    e.n = static_cast<int>(samples.size());
    for (const ProbeHead& h : probe_heads())
        e.head_accuracy[h.name] =
            e.head_n[h.name] > 0
                ? static_cast<real>(correct[h.name]) / e.head_n[h.name]
                : 0.0;
    e.fg_iou = iou_sum / e.n;
    e.head_iou = head_iou_sum / e.n;
    return e;
}

namespace {

// Gates in one place so the failure message always names the worst miss.
std::string gate_failure(const ProbeEval& e, const ProbeConfig& cfg) {
    std::string worst_head;
    real worst_acc = 2.0;
    for (const auto& [name, acc] : e.head_accuracy) {
        if (e.head_n.at(name) == 0)
            return "probe gate failed: no held-out samples judge head '" + name + "'";
        if (acc < worst_acc) {
            worst_acc = acc;
            worst_head = name;
        }
    }
    if (worst_acc < cfg.gate_accuracy)
        return "probe gate failed: head '" + worst_head + "' held-out accuracy " +
               std::to_string(worst_acc) + " < " + std::to_string(cfg.gate_accuracy);
    if (e.fg_iou < cfg.gate_fg_iou)
        return "probe gate failed: figure segmentation IoU " + std::to_string(e.fg_iou) +
               " < " + std::to_string(cfg.gate_fg_iou);
    if (e.head_iou < cfg.gate_head_iou)
        return "probe gate failed: head-region IoU " + std::to_string(e.head_iou) +
               " < " + std::to_string(cfg.gate_head_iou);
    return "";
}

} // namespace

AttributeProbe train_probe(const std::vector<ProbeSample>& train,
                           const std::vector<ProbeSample>& held_out,
                           const ProbeConfig& cfg) {
    cfg.validate();
    check(!train.empty() && !held_out.empty(), "train_probe: empty dataset");
    int H = cfg.height, W = cfg.width;
    for (const ProbeSample& s : train)
        check(s.image.height == H && s.image.width == W,
              "train_probe: sample resolution differs from config");

    AttributeProbe probe(cfg);
    Adam opt({cfg.lr, 0.9, 0.999, 1e-8});
    Rng root(cfg.seed);
    const size_t n = train.size();

    ProbeEval last_eval;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        Rng shuffler = root.fork("shuffle", static_cast<std::uint64_t>(epoch));
        shuffler.shuffle(order);

        for (size_t at = 0; at < n; at += cfg.batch) {
            size_t bn = std::min(static_cast<size_t>(cfg.batch), n - at);
            std::vector<Image> aug(bn);
            std::vector<char> whitened(bn, 0);
            std::vector<const Image*> ptrs(bn);
            std::vector<real> seg_target(bn * 2 * static_cast<size_t>(H) * W);
            for (size_t i = 0; i < bn; ++i) {
                const ProbeSample& s = train[order[at + i]];
                Rng ar = root.fork("aug", static_cast<std::uint64_t>(epoch) * n +
                                              order[at + i]);
                aug[i] = s.image;
                Image fg = s.fg_mask, hm = s.head_mask;
                // Translation with edge clamp; the masks move with the image.
                int dx = cfg.aug_shift > 0
                             ? static_cast<int>(ar.uniform_int(2 * cfg.aug_shift + 1)) -
                                   cfg.aug_shift
                             : 0;
                int dy = cfg.aug_shift > 0
                             ? static_cast<int>(ar.uniform_int(2 * cfg.aug_shift + 1)) -
                                   cfg.aug_shift
                             : 0;
                if (dx != 0 || dy != 0) {
                    auto shift = [&](const Image& src) {
                        Image out(src.height, src.width, src.channels);
                        for (int y = 0; y < src.height; ++y) {
                            int sy = std::clamp(y - dy, 0, src.height - 1);
                            for (int x = 0; x < src.width; ++x) {
                                int sx = std::clamp(x - dx, 0, src.width - 1);
                                for (int c = 0; c < src.channels; ++c)
                                    out.at(y, x, c) = src.at(sy, sx, c);
                            }
                        }
                        return out;
                    };
                    aug[i] = shift(aug[i]);
                    fg = shift(fg);
                    hm = shift(hm);
                }
                if (ar.uniform() < cfg.aug_resample) {
                    // Mimic lower-resolution inputs upscaled to probe size.
                    aug[i] = resize_nearest(resize_nearest(aug[i], H / 2, W / 2), H, W);
                }
                if (ar.uniform() < cfg.aug_whiten) {
                    whitened[i] = 1;
                    for (int p = 0; p < H * W; ++p)
                        if (fg.data[static_cast<size_t>(p)] < 0.5f)
                            for (int c = 0; c < 3; ++c)
                                aug[i].data[static_cast<size_t>(p) * 3 + c] = 1.0f;
                }
                if (ar.uniform() < cfg.aug_noise) {
                    for (float& px : aug[i].data) {
                        double v = px + cfg.noise_sigma * ar.normal();
                        px = static_cast<float>(std::min(1.0, std::max(0.0, v)));
                    }
                }
                if (cfg.aug_bright > 0) {
                    double f = 1.0 + cfg.aug_bright * (2.0 * ar.uniform() - 1.0);
                    for (float& px : aug[i].data)
                        px = static_cast<float>(std::min(1.0, std::max(0.0, px * f)));
                }
                ptrs[i] = &aug[i];
                size_t base = i * 2 * static_cast<size_t>(H) * W;
                for (int p = 0; p < H * W; ++p) {
                    seg_target[base + p] = fg.data[static_cast<size_t>(p)];
                    seg_target[base + static_cast<size_t>(H) * W + p] =
                        hm.data[static_cast<size_t>(p)];
                }
            }

            GradTape tape;
            AttributeProbe::Forward f =
                probe.forward(images_to_tensor(ptrs, /*signed_range=*/false));
            Tensor seg_t = Tensor::from_data({static_cast<int>(bn), 2, H, W},
                                             std::move(seg_target));
            Tensor loss = scale(bce_with_logits(f.seg_logits, seg_t), 4.0);
            for (const ProbeHead& h : probe_heads()) {
                std::vector<int> rows, labels;
                for (size_t i = 0; i < bn; ++i) {
                    const ProbeSample& s = train[order[at + i]];
                    CropMode crop = static_cast<CropMode>(s.labels.at("crop"));
                    if (!head_visible_in(h.name, crop)) continue;
                    if (h.name == "background" && whitened[i]) continue;
                    rows.push_back(static_cast<int>(i));
                    labels.push_back(s.labels.at(h.name));
                }
                if (rows.empty()) continue;
                loss = add(loss, softmax_cross_entropy(
                                     gather_rows(f.head_logits.at(h.name), rows),
                                     labels));
            }
            tape.backward(loss);
            opt.step(probe.params());
        }

        if (epoch + 1 >= cfg.min_epochs) {
            last_eval = evaluate_probe(probe, held_out);
            std::string miss = gate_failure(last_eval, cfg);
            if (cfg.verbose) {
                real worst = 2.0;
                std::string worst_name;
                for (const auto& [name, acc] : last_eval.head_accuracy)
                    if (acc < worst) {
                        worst = acc;
                        worst_name = name;
                    }
                std::vector<ProbeSample> train_probe_subset(
                    train.begin(),
                    train.begin() + std::min<size_t>(train.size(), 120));
                ProbeEval te = evaluate_probe(probe, train_probe_subset);
                real tworst = 2.0;
                std::string tworst_name;
                for (const auto& [name, acc] : te.head_accuracy)
                    if (acc < tworst) {
                        tworst = acc;
                        tworst_name = name;
                    }
                std::fprintf(stderr,
                             "probe epoch %d: held worst %s=%.4f train worst "
                             "%s=%.4f fg_iou=%.4f head_iou=%.4f%s\n",
                             epoch + 1, worst_name.c_str(), worst,
                             tworst_name.c_str(), tworst, last_eval.fg_iou,
                             last_eval.head_iou, miss.empty() ? " [gates pass]" : "");
            }
            if (miss.empty()) {
                probe.gated_ = true;
                probe.gate_eval_ = last_eval;
                return probe;
            }
        }
    }
    if (last_eval.n == 0) last_eval = evaluate_probe(probe, held_out);
    throw ProbeGateError(gate_failure(last_eval, cfg), last_eval);
}

} // namespace charpipe
