#include "charpipe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace charpipe {

namespace {

void require_gated(const AttributeProbe& probe) {
    check(probe.gated(),
          "metric requires a gated probe; train it until every gate passes");
}

// Probe inputs at other resolutions are resampled to the probe's native size;
// nearest keeps the flat palette of this art style intact.
Image probe_view(const AttributeProbe& probe, const Image& img) {
    const ProbeConfig& c = probe.config();
    if (img.height == c.height && img.width == c.width) return img;
    return resize_nearest(img, c.height, c.width);
}

// Luma plane as doubles; 1-channel images pass through.
std::vector<double> luma(const Image& img) {
    check(img.channels == 1 || img.channels == 3, "luma: channels must be 1 or 3");
    size_t n = static_cast<size_t>(img.height) * img.width;
    std::vector<double> out(n);
    if (img.channels == 1) {
        for (size_t i = 0; i < n; ++i) out[i] = img.data[i];
    } else {
        for (size_t i = 0; i < n; ++i)
            out[i] = 0.299 * img.data[i * 3] + 0.587 * img.data[i * 3 + 1] +
                     0.114 * img.data[i * 3 + 2];
    }
    return out;
}

std::vector<double> ssim_kernel() {
    std::vector<double> g(kSsimWindow);
    const double sigma = 1.5;
    double total = 0.0;
    for (int k = 0; k < kSsimWindow; ++k) {
        double d = k - (kSsimWindow - 1) / 2.0;
        g[k] = std::exp(-d * d / (2.0 * sigma * sigma));
        total += g[k];
    }
    for (double& v : g) v /= total;
    return g;
}

// Separable valid-mode Gaussian filter; output is (H-10) x (W-10).
std::vector<double> ssim_filter(const std::vector<double>& src, int H, int W,
                                const std::vector<double>& g) {
    int ow = W - kSsimWindow + 1, oh = H - kSsimWindow + 1;
    std::vector<double> tmp(static_cast<size_t>(H) * ow);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int k = 0; k < kSsimWindow; ++k)
                acc += g[k] * src[static_cast<size_t>(y) * W + x + k];
            tmp[static_cast<size_t>(y) * ow + x] = acc;
        }
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int k = 0; k < kSsimWindow; ++k)
                acc += g[k] * tmp[static_cast<size_t>(y + k) * ow + x];
            out[static_cast<size_t>(y) * ow + x] = acc;
        }
    return out;
}

} // namespace

real psnr(const Image& a, const Image& b) {
    check(a.same_shape(b), "psnr: image shapes differ");
    check(a.numel() > 0, "psnr: empty image");
    double se = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - b.data[i];
        se += d * d;
    }
    double mse = se / static_cast<double>(a.data.size());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

real ssim(const Image& a, const Image& b) {
    check(a.same_shape(b), "ssim: image shapes differ");
    check(a.height >= kSsimWindow && a.width >= kSsimWindow,
          "ssim: image smaller than the 11x11 window");
    const int H = a.height, W = a.width;
    std::vector<double> la = luma(a), lb = luma(b);
    size_t n = la.size();
    std::vector<double> laa(n), lbb(n), lab(n);
    for (size_t i = 0; i < n; ++i) {
        laa[i] = la[i] * la[i];
        lbb[i] = lb[i] * lb[i];
        lab[i] = la[i] * lb[i];
    }
    std::vector<double> g = ssim_kernel();
    std::vector<double> ma = ssim_filter(la, H, W, g);
    std::vector<double> mb = ssim_filter(lb, H, W, g);
    std::vector<double> maa = ssim_filter(laa, H, W, g);
    std::vector<double> mbb = ssim_filter(lbb, H, W, g);
    std::vector<double> mab = ssim_filter(lab, H, W, g);
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03; // (K * MAX)^2
    double total = 0.0;
    for (size_t i = 0; i < ma.size(); ++i) {
        double mu_a = ma[i], mu_b = mb[i];
        double var_a = maa[i] - mu_a * mu_a;
        double var_b = mbb[i] - mu_b * mu_b;
        double cov = mab[i] - mu_a * mu_b;
        total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
                 ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    }
    return total / static_cast<double>(ma.size());
}

real cosine(const std::vector<real>& a, const std::vector<real>& b) {
    check(a.size() == b.size() && !a.empty(), "cosine: dimension mismatch");
    if (a == b) return 1.0; // exact value for identical vectors
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double den = std::sqrt(na) * std::sqrt(nb);
    if (den == 0.0) return 0.0;
    return std::clamp(dot / den, -1.0, 1.0);
}

real mean_pairwise_cosine(const std::vector<std::vector<real>>& vs) {
    check(vs.size() >= 2, "mean_pairwise_cosine: need at least 2 vectors");
    std::vector<double> cosines;
    cosines.reserve(vs.size() * (vs.size() - 1) / 2);
    for (size_t i = 0; i < vs.size(); ++i)
        for (size_t j = i + 1; j < vs.size(); ++j)
            cosines.push_back(cosine(vs[i], vs[j]));
    // Sorted accumulation keeps the mean exactly permutation-invariant.
    std::sort(cosines.begin(), cosines.end());
    double total = 0.0;
    for (double c : cosines) total += c;
    return total / static_cast<double>(cosines.size());
}

Image remove_background(const Image& img, const Image& bg_mask) {
    check(bg_mask.height == img.height && bg_mask.width == img.width &&
              bg_mask.channels == 1,
          "remove_background: mask must be 1-channel at image resolution");
    Image out = img;
    size_t n = static_cast<size_t>(img.height) * img.width;
    for (size_t p = 0; p < n; ++p)
        if (bg_mask.data[p] >= 0.5f)
            for (int c = 0; c < img.channels; ++c)
                out.data[p * img.channels + c] = 1.0f;
    return out;
}

real appearance_consistency(const AttributeProbe& probe, const Image& gen,
                            const CharacterSpec& ref_labels) {
    require_gated(probe);
    Image v = probe_view(probe, gen);
    Image clean = remove_background(v, probe.predict_bg_mask(v));
    std::map<std::string, int> pred = probe.classify(clean);
    std::map<std::string, int> truth = character_labels(ref_labels);
    int correct = 0;
    for (const std::string& name : appearance_head_names())
        correct += pred.at(name) == truth.at(name);
    return static_cast<real>(correct) /
           static_cast<real>(appearance_head_names().size());
}

real controllability(const AttributeProbe& probe, const Image& gen,
                     const PromptCondition& prompt) {
    require_gated(probe);
    prompt.validate();
    std::map<std::string, int> pred = probe.classify(probe_view(probe, gen));
    int scale_id = 0;
    bool flip = false;
    CropMode crop = CropMode::full;
    viewpoint_decompose(prompt.viewpoint_id, scale_id, flip, crop);
    int correct = 0;
    correct += pred.at("pose") == prompt.action_id;
    correct += pred.at("background") == prompt.background_id;
    correct += pred.at("expression") == prompt.expression_id;
    correct += pred.at("scale") == scale_id && pred.at("flip") == (flip ? 1 : 0) &&
               pred.at("crop") == static_cast<int>(crop);
    return static_cast<real>(correct) / 4.0;
}

real ap_consistency(const AttributeProbe& probe, const std::vector<Image>& images) {
    require_gated(probe);
    check(images.size() >= 2, "ap_consistency: need at least 2 images");
    std::vector<std::vector<real>> embs;
    embs.reserve(images.size());
    for (const Image& img : images) {
        Image v = probe_view(probe, img);
        embs.push_back(probe.embedding(remove_background(v, probe.predict_bg_mask(v))));
    }
    return mean_pairwise_cosine(embs);
}

std::optional<real> face_region_sim(const AttributeProbe& probe, const Image& gen,
                                    const Image& ref) {
    require_gated(probe);
    Image vg = probe_view(probe, gen);
    Image vr = probe_view(probe, ref);
    std::optional<CropBox> bg = probe.head_region(vg);
    std::optional<CropBox> br = probe.head_region(vr);
    if (!bg || !br) return std::nullopt;
    std::vector<real> eg =
        probe.embedding(apply_crop(vg, *bg, kFaceCropSize, kFaceCropSize));
    std::vector<real> er =
        probe.embedding(apply_crop(vr, *br, kFaceCropSize, kFaceCropSize));
    return cosine(eg, er);
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json j;
    j["schema_version"] = schema_version;
    j["config_hash"] = config_hash;
    auto put = [&](const char* name, const std::optional<MetricValue>& v) {
        if (v) j[name] = {{"value", v->value}, {"n", v->n}};
    };
    put("psnr", psnr);
    put("ssim", ssim);
    put("appearance_consistency", appearance_consistency);
    put("controllability", controllability);
    put("ap_consistency", ap_consistency);
    put("face_region_sim", face_region_sim);
    if (probe_gate) j["probe_gate"] = probe_eval_to_json(*probe_gate);
    return j;
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
    MetricReport r;
    check(j.contains("schema_version"), "metric report: missing schema_version");
    r.schema_version = j.at("schema_version").get<int>();
    check(r.schema_version == kMetricSchemaVersion,
          "metric report: unsupported schema version " +
              std::to_string(r.schema_version));
    r.config_hash = j.at("config_hash").get<std::string>();
    auto take = [&](const char* name, std::optional<MetricValue>& v) {
        if (!j.contains(name)) return;
        v = MetricValue{j.at(name).at("value").get<real>(),
                        j.at(name).at("n").get<int>()};
    };
    take("psnr", r.psnr);
    take("ssim", r.ssim);
    take("appearance_consistency", r.appearance_consistency);
    take("controllability", r.controllability);
    take("ap_consistency", r.ap_consistency);
    take("face_region_sim", r.face_region_sim);
    if (j.contains("probe_gate")) r.probe_gate = probe_eval_from_json(j.at("probe_gate"));
    return r;
}

std::string MetricReport::table() const {
    std::ostringstream os;
    os << std::left << std::setw(24) << "metric" << std::right << std::setw(10)
       << "value" << std::setw(8) << "n" << "\n";
    auto row = [&](const char* name, const std::optional<MetricValue>& v) {
        if (!v) return;
        os << std::left << std::setw(24) << name << std::right << std::setw(10)
           << std::fixed << std::setprecision(4) << v->value << std::setw(8) << v->n
           << "\n";
    };
    row("psnr_db", psnr);
    row("ssim", ssim);
    row("appearance_consistency", appearance_consistency);
    row("controllability", controllability);
    row("ap_consistency", ap_consistency);
    row("face_region_sim", face_region_sim);
    return os.str();
}

} // namespace charpipe
