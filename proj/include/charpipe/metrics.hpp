#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "charpipe/image.hpp"
#include "charpipe/probe.hpp"
#include "charpipe/prompt.hpp"

namespace charpipe {

// ---- reference-free image fidelity ----

// 10*log10(1/MSE) over all channels, MAX = 1; capped at 99 dB so identical
// images report a finite sentinel. Throws ValidationError on shape mismatch.
real psnr(const Image& a, const Image& b);
inline constexpr real kPsnrCap = 99.0;

// Mean local SSIM on luma, 11x11 Gaussian window sigma 1.5, K1 0.01, K2 0.03,
// MAX 1, valid window positions only. Throws ValidationError if either side
// of the image is smaller than the window.
real ssim(const Image& a, const Image& b);
inline constexpr int kSsimWindow = 11;

// ---- embedding helpers ----

real cosine(const std::vector<real>& a, const std::vector<real>& b);
// Mean cosine over all unordered pairs; requires >= 2 vectors.
real mean_pairwise_cosine(const std::vector<std::vector<real>>& vs);

// ---- probe-oracle metrics ----

// Background pixels (mask >= 0.5) replaced with white. The mask is a 1-channel
// background mask at image resolution, 1 = background.
Image remove_background(const Image& img, const Image& bg_mask);

// Fraction of the 7 appearance heads that match ref_labels, judged on the
// background-removed image (mask predicted by the probe). Probe must be gated.
real appearance_consistency(const AttributeProbe& probe, const Image& gen,
                            const CharacterSpec& ref_labels);

// Fraction of the 4 prompted factors judged correct on the raw image: pose,
// background, expression, and the viewpoint triple (scale AND flip AND crop
// all correct counts as one factor). Probe must be gated.
real controllability(const AttributeProbe& probe, const Image& gen,
                     const PromptCondition& prompt);

// Mean pairwise cosine of probe embeddings over background-removed images.
// Requires >= 2 images and a gated probe.
real ap_consistency(const AttributeProbe& probe, const std::vector<Image>& images);

// Cosine of probe embeddings over the two predicted head crops, each resized
// to kFaceCropSize. Missing when either image has no detected head region.
std::optional<real> face_region_sim(const AttributeProbe& probe, const Image& gen,
                                    const Image& ref);
inline constexpr int kFaceCropSize = 24;

// ---- aggregated report ----

struct MetricValue {
    real value = 0.0;
    int n = 0;  // sample count behind the aggregate
    bool operator==(const MetricValue&) const = default;
};

inline constexpr int kMetricSchemaVersion = 1;

// Serializable container for one evaluation run. Only the metrics that were
// actually computed are present; every value carries its sample count and the
// report embeds the gate measurement of the probe that produced it.
struct MetricReport {
    int schema_version = kMetricSchemaVersion;
    std::string config_hash;
    std::optional<MetricValue> psnr;
    std::optional<MetricValue> ssim;
    std::optional<MetricValue> appearance_consistency;
    std::optional<MetricValue> controllability;
    std::optional<MetricValue> ap_consistency;
    std::optional<MetricValue> face_region_sim;
    std::optional<ProbeEval> probe_gate;

    bool operator==(const MetricReport&) const = default;

    nlohmann::json to_json() const;
    static MetricReport from_json(const nlohmann::json& j);
    // Fixed-order human-readable table of the present metrics.
    std::string table() const;
};

} // namespace charpipe
