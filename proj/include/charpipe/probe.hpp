#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "charpipe/common.hpp"
#include "charpipe/nn.hpp"
#include "charpipe/render.hpp"

namespace charpipe {

// One classification head of the attribute probe.
struct ProbeHead {
    std::string name;
    int classes = 0;
};

// All heads in fixed order: the 7 appearance attributes, the 6 scene factors,
// and the visual domain.
const std::vector<ProbeHead>& probe_heads();
// The 7 appearance heads (CharacterSpec fields), in CharacterSpec order.
const std::vector<std::string>& appearance_head_names();
// Whether a head's attribute is visually present in renders at this crop;
// heads are trained and accuracy-gated only where their evidence is visible
// (e.g. bottom_color cannot be judged on a head-only crop).
bool head_visible_in(const std::string& head, CropMode crop);
// CharacterSpec fields keyed by appearance head name.
std::map<std::string, int> character_labels(const CharacterSpec& ch);

struct ProbeConfig {
    int height = 96;
    int width = 64;
    int base = 24;          // trunk width; channels run base/2*base/4*base
    int groups = 8;
    int epochs = 40;        // upper bound; training stops once gates pass
    int min_epochs = 6;     // no gate evaluation before this many epochs
    int batch = 16;
    real lr = 2e-3;
    std::uint64_t seed = 0;
    real gate_accuracy = 0.95;  // per-head held-out accuracy gate
    real gate_fg_iou = 0.90;    // figure-segmentation IoU gate
    real gate_head_iou = 0.50;  // head-region channel sanity gate
    real aug_whiten = 0.35;     // P(background whitened) per training sample
    real aug_noise = 0.50;      // P(pixel noise) per training sample
    real noise_sigma = 0.02;
    int aug_shift = 2;          // max +/- pixels of training translation
    real aug_bright = 0.04;     // max fractional brightness jitter
    real aug_resample = 0.25;   // P(half-resolution round trip), matches upscaled inputs
    bool verbose = false;       // per-epoch gate summary on stderr; not serialized

    void validate() const;
};

// One labeled training/evaluation example, derived from a clean render.
struct ProbeSample {
    Image image;      // H x W x 3
    Image fg_mask;    // H x W x 1, 1 = figure
    Image head_mask;  // H x W x 1, 1 = head/hair/face region
    std::map<std::string, int> labels;  // one entry per probe head
};

ProbeSample probe_sample_from_render(const RenderedSample& r);

// Renders a uniform factor-coverage dataset over both domains, in memory.
std::vector<ProbeSample> render_probe_dataset(int n_chars, int scenes_per_char, int H,
                                              int W, std::uint64_t seed);

// Held-out measurement used for gating and for the permutation sanity check.
struct ProbeEval {
    std::map<std::string, real> head_accuracy;  // over visible-evidence subset
    std::map<std::string, int> head_n;
    real fg_iou = 0.0;
    real head_iou = 0.0;
    int n = 0;

    bool operator==(const ProbeEval&) const = default;
};

nlohmann::json probe_eval_to_json(const ProbeEval& e);
ProbeEval probe_eval_from_json(const nlohmann::json& j);

// Thrown when a trained probe misses a gate; carries the full measurement.
struct ProbeGateError : TrendError {
    ProbeEval eval;
    ProbeGateError(const std::string& msg, ProbeEval e)
        : TrendError(msg), eval(std::move(e)) {}
};

// Supervised attribute/segmentation oracle. Conv trunk with one linear
// classifier per head on pooled features, a two-channel segmentation decoder
// (figure + head region), and a pooled embedding tap for cosine metrics.
class AttributeProbe {
public:
    explicit AttributeProbe(const ProbeConfig& cfg);

    // Training-time forward on a batch [N, 3, H, W] in [0, 1].
    struct Forward {
        std::map<std::string, Tensor> head_logits;  // each [N, classes]
        Tensor seg_logits;                          // [N, 2, H, W]
        Tensor pooled;                              // [N, 4*base]
    };
    Forward forward(const Tensor& x) const;

    // Inference (no gradients, any H/W multiple of 8).
    std::map<std::string, int> classify(const Image& img) const;
    std::vector<real> embedding(const Image& img) const;
    // Predicted background mask (1 = background), thresholded at 0.5.
    Image predict_bg_mask(const Image& img) const;
    // Tight padded box around the predicted head region; nullopt if none.
    std::optional<CropBox> head_region(const Image& img) const;

    bool gated() const { return gated_; }
    const ProbeEval& gate_eval() const { return gate_eval_; }
    const ProbeConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    void save(const std::string& path) const;
    static AttributeProbe load(const std::string& path);

private:
    friend AttributeProbe train_probe(const std::vector<ProbeSample>&,
                                      const std::vector<ProbeSample>&,
                                      const ProbeConfig&);
    ProbeConfig cfg_;
    ParamStore params_;
    bool gated_ = false;
    ProbeEval gate_eval_;
};

// Measures held-out accuracy per head (visible-evidence subsets) and
// segmentation IoU on clean samples.
ProbeEval evaluate_probe(const AttributeProbe& probe,
                         const std::vector<ProbeSample>& samples);

// Trains all heads jointly; throws ProbeGateError (naming the worst head and
// its accuracy) unless every gate in cfg holds on held_out.
AttributeProbe train_probe(const std::vector<ProbeSample>& train,
                           const std::vector<ProbeSample>& held_out,
                           const ProbeConfig& cfg);

} // namespace charpipe
