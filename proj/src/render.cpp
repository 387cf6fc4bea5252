#include "charpipe/render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>

#include "charpipe/common.hpp"

namespace charpipe {

namespace {

// ---------------------------------------------------------------------------
// Palettes and figure proportions. Proportions are fractions of image height.
// ---------------------------------------------------------------------------

struct Color {
    double r = 0, g = 0, b = 0;
};

constexpr Color kHairPalette[kHairColors] = {
    {0.10, 0.09, 0.08}, {0.38, 0.24, 0.12}, {0.91, 0.79, 0.35}, {0.72, 0.25, 0.12},
    {0.62, 0.62, 0.64}, {0.15, 0.35, 0.80}, {0.16, 0.60, 0.30}, {0.93, 0.45, 0.70}};
constexpr Color kSkinPalette[kSkinTones] = {
    {0.96, 0.87, 0.76}, {0.87, 0.72, 0.53}, {0.65, 0.48, 0.33}, {0.42, 0.30, 0.22}};
constexpr Color kTopPalette[kTopColors] = {
    {0.85, 0.15, 0.15}, {0.15, 0.30, 0.85}, {0.12, 0.65, 0.30}, {0.95, 0.85, 0.15},
    {0.55, 0.20, 0.75}, {0.95, 0.55, 0.10}, {0.92, 0.92, 0.92}, {0.10, 0.65, 0.65}};
constexpr Color kBottomPalette[kBottomColors] = {
    {0.10, 0.15, 0.35}, {0.12, 0.12, 0.12}, {0.45, 0.30, 0.15}, {0.55, 0.55, 0.58},
    {0.70, 0.12, 0.12}, {0.15, 0.45, 0.20}, {0.76, 0.69, 0.50}, {0.90, 0.90, 0.92}};

constexpr Color kShoe = {0.16, 0.13, 0.11};
constexpr Color kOutline = {0.10, 0.10, 0.12};
constexpr Color kHat = {0.45, 0.16, 0.16};
constexpr Color kScarf = {0.93, 0.52, 0.11};
constexpr Color kFeatureDark = {0.08, 0.08, 0.10};
constexpr Color kBlush = {0.95, 0.55, 0.55};
constexpr Color kTear = {0.25, 0.55, 0.95};

// Fractions of H.
constexpr double kHeadR = 0.105;
constexpr double kNeckToHead = 0.16;
constexpr double kTorsoLen = 0.28;
constexpr double kShoulderW = 0.085;
constexpr double kHipW = 0.055;
constexpr double kUpperArm = 0.13;
constexpr double kForearm = 0.115;
constexpr double kThigh = 0.16;
constexpr double kShin = 0.15;
constexpr double kArmR = 0.024;
constexpr double kLegR = 0.030;
constexpr double kNeckR = 0.020;
constexpr double kHandR = 0.030;
constexpr double kFootR = 0.034;

// Head-only crop extents in head-radius units around the head anchor,
// for the unflipped figure (the ponytail trails in +x).
constexpr double kHeadCropXNeg = 1.55;
constexpr double kHeadCropXPos = 2.05;
constexpr double kHeadCropYUp = 2.0;
constexpr double kHeadCropYDown = 0.70;
// Upper crop: fixed fraction of the frame height, anchored at the top edge.
constexpr double kUpperCropFrac = 0.55;

struct Pt {
    double x = 0, y = 0;
};

// Limb directions as unit vectors (screen coords, y down), so the geometry
// is pure arithmetic on literals and bitwise reproducible everywhere.
struct PoseDef {
    Pt torso;                  // pelvis -> neck
    Pt ua_l, fa_l, ua_r, fa_r; // upper arm / forearm directions
    Pt th_l, sh_l, th_r, sh_r; // thigh / shin directions
    double off_x, off_y;       // head anchor offset, fractions of H
};

constexpr PoseDef kPoses12[kPoses] = {
    // 0 neutral (standard): the one left-right symmetric body pose.
    {{0, -1}, {0.17365, 0.98481}, {0, 1}, {-0.17365, 0.98481}, {0, 1},
     {0.08716, 0.99619}, {0, 1}, {-0.08716, 0.99619}, {0, 1}, 0.0, 0.0},
    // 1 wave
    {{0, -1}, {0.5, -0.86603}, {0, -1}, {-0.17365, 0.98481}, {0, 1},
     {0.08716, 0.99619}, {0, 1}, {-0.08716, 0.99619}, {0, 1}, 0.01, 0.0},
    // 2 point
    {{-0.08716, -0.99619}, {0.17365, 0.98481}, {0, 1}, {-0.98481, -0.17365}, {-1, 0},
     {0.08716, 0.99619}, {0, 1}, {-0.08716, 0.99619}, {0, 1}, -0.03, 0.0},
    // 3 walk
    {{0, -1}, {-0.34202, 0.93969}, {-0.17365, 0.98481}, {0.34202, 0.93969},
     {0.17365, 0.98481}, {0.34202, 0.93969}, {-0.17365, 0.98481}, {-0.34202, 0.93969},
     {0.17365, 0.98481}, 0.02, 0.0},
    // 4 run
    {{0.20791, -0.97815}, {-0.64279, 0.76604}, {-0.98481, 0.17365}, {0.86603, 0.5},
     {1, 0}, {0.70711, 0.70711}, {-0.5, 0.86603}, {-0.70711, 0.70711}, {0.5, 0.86603},
     0.05, 0.02},
    // 5 jump
    {{0, -1}, {0.42262, -0.90631}, {0.17365, -0.98481}, {-0.5, -0.86603},
     {-0.17365, -0.98481}, {0.5, 0.86603}, {-0.34202, 0.93969}, {-0.5, 0.86603},
     {0.34202, 0.93969}, 0.0, 0.01},
    // 6 sit
    {{0, -1}, {0.5, 0.86603}, {0.98481, 0.17365}, {-0.08716, 0.99619}, {0, 1},
     {1, 0}, {0, 1}, {0.98481, 0.17365}, {0, 1}, 0.03, 0.10},
    // 7 lean
    {{-0.30902, -0.95106}, {-0.08716, 0.99619}, {0, 1}, {-0.25882, 0.96593},
     {-0.08716, 0.99619}, {0.17365, 0.98481}, {-0.08716, 0.99619}, {-0.17365, 0.98481},
     {0.08716, 0.99619}, -0.06, 0.01},
    // 8 fold
    {{0, -1}, {-0.5, 0.86603}, {-0.98481, -0.17365}, {0.34202, 0.93969},
     {0.98481, 0.17365}, {0.03490, 0.99939}, {0, 1}, {-0.03490, 0.99939}, {0, 1},
     0.0, 0.0},
    // 9 kick
    {{0.08716, -0.99619}, {0.86603, -0.5}, {1, 0}, {-0.5, 0.86603}, {-0.34202, 0.93969},
     {0, 1}, {0, 1}, {0.93969, 0.34202}, {0.98481, 0.17365}, -0.02, 0.01},
    // 10 bow (lean capped so the head-only crop stays clear of the torso)
    {{0.34202, -0.93969}, {-0.5, 0.86603}, {-0.57358, 0.81915}, {-0.57358, 0.81915},
     {-0.64279, 0.76604}, {0.08716, 0.99619}, {0, 1}, {-0.08716, 0.99619}, {0, 1},
     0.05, 0.10},
    // 11 stretch
    {{-0.10453, -0.99452}, {0, -1}, {0, -1}, {0, 1}, {0, 1}, {0.08716, 0.99619},
     {0, 1}, {-0.17365, 0.98481}, {0.08716, 0.99619}, -0.02, 0.0},
};

double noise01(std::uint64_t seed, std::uint64_t idx, std::uint64_t salt) {
    std::uint64_t h = Rng::mix(Rng::mix(seed + salt * 0x9E3779B97F4A7C15ull) ^ idx);
    return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// ---------------------------------------------------------------------------
// Painter canvas with exact coverage tracking.
// ---------------------------------------------------------------------------

struct Canvas {
    int H = 0, W = 0;
    std::vector<double> rgb;            // H*W*3
    std::vector<std::uint8_t> part;     // H*W

    Canvas(int h, int w) : H(h), W(w), rgb(static_cast<size_t>(h) * w * 3, 0.0),
                           part(static_cast<size_t>(h) * w, 0) {}

    void set(int y, int x, const Color& c, Part p) {
        size_t i = (static_cast<size_t>(y) * W + x);
        rgb[i * 3 + 0] = c.r;
        rgb[i * 3 + 1] = c.g;
        rgb[i * 3 + 2] = c.b;
        part[i] = static_cast<std::uint8_t>(p);
    }
};

using Shade = std::function<Color(double px, double py)>;

void draw_disc(Canvas& c, double cx, double cy, double r, Part part, const Shade& col) {
    int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
    int y1 = std::min(c.H - 1, static_cast<int>(std::ceil(cy + r + 1)));
    int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
    int x1 = std::min(c.W - 1, static_cast<int>(std::ceil(cx + r + 1)));
    double r2 = r * r;
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            double px = x + 0.5, py = y + 0.5;
            double dx = px - cx, dy = py - cy;
            if (dx * dx + dy * dy <= r2) c.set(y, x, col(px, py), part);
        }
    }
}

void draw_capsule(Canvas& c, Pt a, Pt b, double r, Part part, const Shade& col) {
    double lx = b.x - a.x, ly = b.y - a.y;
    double len2 = lx * lx + ly * ly;
    int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - r - 1)));
    int y1 = std::min(c.H - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + r + 1)));
    int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - r - 1)));
    int x1 = std::min(c.W - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + r + 1)));
    double r2 = r * r;
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            double px = x + 0.5, py = y + 0.5;
            double t = len2 > 0 ? ((px - a.x) * lx + (py - a.y) * ly) / len2 : 0.0;
            t = std::min(1.0, std::max(0.0, t));
            double dx = px - (a.x + t * lx), dy = py - (a.y + t * ly);
            if (dx * dx + dy * dy <= r2) c.set(y, x, col(px, py), part);
        }
    }
}

void draw_quad(Canvas& c, const std::array<Pt, 4>& p, Part part, const Shade& col) {
    double ylo = p[0].y, yhi = p[0].y, xlo = p[0].x, xhi = p[0].x;
    for (const Pt& q : p) {
        ylo = std::min(ylo, q.y);
        yhi = std::max(yhi, q.y);
        xlo = std::min(xlo, q.x);
        xhi = std::max(xhi, q.x);
    }
    int y0 = std::max(0, static_cast<int>(std::floor(ylo)));
    int y1 = std::min(c.H - 1, static_cast<int>(std::ceil(yhi)));
    int x0 = std::max(0, static_cast<int>(std::floor(xlo)));
    int x1 = std::min(c.W - 1, static_cast<int>(std::ceil(xhi)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            double px = x + 0.5, py = y + 0.5;
            bool pos = false, neg = false;
            for (int i = 0; i < 4; ++i) {
                const Pt& a = p[i];
                const Pt& b = p[(i + 1) % 4];
                double cr = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
                if (cr > 0) pos = true;
                if (cr < 0) neg = true;
            }
            if (!(pos && neg)) c.set(y, x, col(px, py), part);
        }
    }
}

void draw_rect(Canvas& c, double rx0, double ry0, double rx1, double ry1, Part part,
               const Shade& col) {
    int y0 = std::max(0, static_cast<int>(std::floor(ry0)));
    int y1 = std::min(c.H - 1, static_cast<int>(std::ceil(ry1)));
    int x0 = std::max(0, static_cast<int>(std::floor(rx0)));
    int x1 = std::min(c.W - 1, static_cast<int>(std::ceil(rx1)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            double px = x + 0.5, py = y + 0.5;
            if (px >= rx0 && px <= rx1 && py >= ry0 && py <= ry1)
                c.set(y, x, col(px, py), part);
        }
    }
}

// ---------------------------------------------------------------------------
// Figure geometry.
// ---------------------------------------------------------------------------

struct FigureGeom {
    Pt anchor;  // head center in canvas pixels
    Pt pelvis, neck, head;
    Pt sh_l, sh_r, el_l, el_r, wr_l, wr_r;
    Pt hip_l, hip_r, kn_l, kn_r, an_l, an_r;
    double s = 1.0;      // canvas units per H-unit (= scale * H)
    double head_r = 0.0; // pixels
};

// Geometry is always laid out unflipped; scene.flip is applied afterwards as an
// exact column mirror of the rasterized buffers.
FigureGeom figure_geometry(const SceneSpec& scene, int H, int W) {
    const PoseDef& pd = kPoses12[scene.pose_id];
    double s = scene.scale() * H;

    Pt t = pd.torso;
    Pt perp{-t.y, t.x};

    // Figure space: pelvis at origin, H-units.
    Pt P{0, 0};
    Pt N{P.x + kTorsoLen * t.x, P.y + kTorsoLen * t.y};
    Pt HC{N.x + kNeckToHead * t.x, N.y + kNeckToHead * t.y};
    auto limb = [&](Pt from, Pt dir, double len) {
        return Pt{from.x + len * dir.x, from.y + len * dir.y};
    };
    Pt SL{N.x + kShoulderW * perp.x, N.y + kShoulderW * perp.y};
    Pt SR{N.x - kShoulderW * perp.x, N.y - kShoulderW * perp.y};
    Pt EL = limb(SL, pd.ua_l, kUpperArm);
    Pt WL = limb(EL, pd.fa_l, kForearm);
    Pt ER = limb(SR, pd.ua_r, kUpperArm);
    Pt WR = limb(ER, pd.fa_r, kForearm);
    Pt HL{P.x + kHipW * perp.x, P.y + kHipW * perp.y};
    Pt HR{P.x - kHipW * perp.x, P.y - kHipW * perp.y};
    Pt KL = limb(HL, pd.th_l, kThigh);
    Pt AL = limb(KL, pd.sh_l, kShin);
    Pt KR = limb(HR, pd.th_r, kThigh);
    Pt AR = limb(KR, pd.sh_r, kShin);

    FigureGeom g;
    g.s = s;
    g.head_r = kHeadR * s;
    g.anchor = Pt{W / 2.0 + pd.off_x * H, H / 6.0 + pd.off_y * H};
    auto to_canvas = [&](Pt j) {
        return Pt{g.anchor.x + s * (j.x - HC.x), g.anchor.y + s * (j.y - HC.y)};
    };
    g.pelvis = to_canvas(P);
    g.neck = to_canvas(N);
    g.head = to_canvas(HC);
    g.sh_l = to_canvas(SL);
    g.sh_r = to_canvas(SR);
    g.el_l = to_canvas(EL);
    g.el_r = to_canvas(ER);
    g.wr_l = to_canvas(WL);
    g.wr_r = to_canvas(WR);
    g.hip_l = to_canvas(HL);
    g.hip_r = to_canvas(HR);
    g.kn_l = to_canvas(KL);
    g.kn_r = to_canvas(KR);
    g.an_l = to_canvas(AL);
    g.an_r = to_canvas(AR);
    return g;
}

// ---------------------------------------------------------------------------
// Validation.
// ---------------------------------------------------------------------------

void check_field(int v, int n, const char* type, const char* field) {
    if (v < 0 || v >= n) {
        throw ValidationError(std::string(type) + "." + field + " out of range [0, " +
                              std::to_string(n) + "): got " + std::to_string(v));
    }
}

void check_resolution(int H, int W) {
    check(H >= 32 && W >= 32, "render: resolution must be at least 32x32, got " +
                                  std::to_string(W) + "x" + std::to_string(H));
    check(3 * W == 2 * H, "render: width:height must be 2:3, got " + std::to_string(W) +
                              "x" + std::to_string(H));
}

} // namespace

void CharacterSpec::validate() const {
    check_field(hair_color, kHairColors, "CharacterSpec", "hair_color");
    check_field(hair_style, kHairStyles, "CharacterSpec", "hair_style");
    check_field(skin_tone, kSkinTones, "CharacterSpec", "skin_tone");
    check_field(top_color, kTopColors, "CharacterSpec", "top_color");
    check_field(top_pattern, kTopPatterns, "CharacterSpec", "top_pattern");
    check_field(bottom_color, kBottomColors, "CharacterSpec", "bottom_color");
    check_field(accessory, kAccessories, "CharacterSpec", "accessory");
}

void SceneSpec::validate() const {
    check_field(pose_id, kPoses, "SceneSpec", "pose_id");
    check_field(background_id, kBackgrounds, "SceneSpec", "background_id");
    check_field(expression_id, kExpressions, "SceneSpec", "expression_id");
    check_field(scale_id, kScales, "SceneSpec", "scale_id");
}

bool SceneSpec::is_standard_visible() const {
    SceneSpec ref = std_scene();
    return pose_id == ref.pose_id && background_id == ref.background_id &&
           expression_id == ref.expression_id && scale_id == ref.scale_id &&
           flip == ref.flip && crop_mode == ref.crop_mode;
}

SceneSpec std_scene() {
    SceneSpec s;
    s.pose_id = 0;
    s.background_id = 0;
    s.expression_id = 0;
    s.scale_id = 1;
    s.flip = false;
    s.crop_mode = CropMode::full;
    s.noise_seed = 0;
    return s;
}

std::string to_string(CropMode m) {
    switch (m) {
        case CropMode::full: return "full";
        case CropMode::upper: return "upper";
        case CropMode::head_only: return "head_only";
    }
    throw ValidationError("invalid crop mode");
}

CropMode crop_mode_from_string(const std::string& s) {
    if (s == "full") return CropMode::full;
    if (s == "upper") return CropMode::upper;
    if (s == "head_only") return CropMode::head_only;
    throw ValidationError("SceneSpec.crop_mode: unknown value '" + s + "'");
}

std::string to_string(Domain d) {
    return d == Domain::styleA ? "styleA" : "styleB";
}

Domain domain_from_string(const std::string& s) {
    if (s == "styleA") return Domain::styleA;
    if (s == "styleB") return Domain::styleB;
    throw ValidationError("domain: unknown value '" + s + "'");
}

Image render_background(int background_id, Domain domain, int H, int W,
                        std::int64_t noise_seed) {
    check_field(background_id, kBackgrounds, "SceneSpec", "background_id");
    check(H >= 1 && W >= 1, "render_background: empty resolution");
    Image img(H, W, 3);
    int stripe = std::max(1, W / 8);
    int cell = std::max(1, H / 12);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            Color c;
            switch (background_id) {
                case 0: c = {1.0, 1.0, 1.0}; break;
                case 1: c = {0.72, 0.84, 0.95}; break;
                case 2: c = {0.78, 0.92, 0.75}; break;
                case 3:
                    c = (y < (6 * H) / 10) ? Color{0.55, 0.78, 0.95}
                                           : Color{0.45, 0.70, 0.40};
                    break;
                case 4:
                    c = ((x / stripe) % 2 == 0) ? Color{0.90, 0.80, 0.60}
                                                : Color{0.80, 0.68, 0.45};
                    break;
                case 5:
                    c = (((x / cell) + (y / cell)) % 2 == 0) ? Color{0.85, 0.85, 0.88}
                                                             : Color{0.70, 0.70, 0.75};
                    break;
                case 6: c = {0.25, 0.25, 0.32}; break;
                default: {
                    double t = H > 1 ? static_cast<double>(y) / (H - 1) : 0.0;
                    c = {0.95 + t * (0.55 - 0.95), 0.75 + t * (0.35 - 0.75),
                         0.75 + t * (0.55 - 0.75)};
                    break;
                }
            }
            if (domain == Domain::styleB) {
                double shade = 0.86 + 0.14 * (1.0 - (H > 1 ? static_cast<double>(y) / (H - 1) : 0.0));
                std::uint64_t idx = static_cast<std::uint64_t>(y) * W + x;
                double n = (noise01(static_cast<std::uint64_t>(noise_seed), idx, 7) - 0.5) * 0.10;
                c = {clamp01(c.r * shade + n), clamp01(c.g * shade + n),
                     clamp01(c.b * shade + n)};
            }
            img.at(y, x, 0) = static_cast<float>(c.r);
            img.at(y, x, 1) = static_cast<float>(c.g);
            img.at(y, x, 2) = static_cast<float>(c.b);
        }
    }
    return img;
}

CropBox crop_box(const SceneSpec& scene, int H, int W) {
    scene.validate();
    check_resolution(H, W);
    if (scene.crop_mode == CropMode::full) return {0, 0, W, H};

    // Flip mirrors the rasterized frame, so the box for a flipped scene is the
    // exact integer mirror of the unflipped box.
    if (scene.flip) {
        SceneSpec unflipped = scene;
        unflipped.flip = false;
        CropBox b = crop_box(unflipped, H, W);
        return {W - b.x0 - b.w, b.y0, b.w, b.h};
    }

    const PoseDef& pd = kPoses12[scene.pose_id];
    double s = scene.scale() * H;
    double r = kHeadR * s;
    double ax = W / 2.0 + pd.off_x * H;
    double ay = H / 6.0 + pd.off_y * H;

    double x0, y0, x1, y1;
    if (scene.crop_mode == CropMode::head_only) {
        x0 = ax - kHeadCropXNeg * r;
        x1 = ax + kHeadCropXPos * r;
        y0 = ay - kHeadCropYUp * r;
        y1 = ay + kHeadCropYDown * r;
    } else { // upper
        // Fixed-height top-of-frame box (not proportional to figure scale):
        // inside a scale-proportional box the stretched figure would look the
        // same at every scale, which makes the scale factor unrecoverable
        // from upper crops.
        y0 = 0.0;
        y1 = kUpperCropFrac * H;
        double half_w = (y1 - y0) * W / (2.0 * H);
        x0 = ax - half_w;
        x1 = ax + half_w;
    }
    // Vertical overflow is trimmed rather than translated: the bottom edge is a
    // content boundary (just above the torso for head crops), so sliding the
    // box down would leak lower-body pixels into the crop.
    int by = std::max(0, static_cast<int>(std::llround(y0)));
    int by1 = std::min(H, static_cast<int>(std::llround(y1)));
    int bh = std::max(1, by1 - by);
    by = std::min(by, H - bh);
    int bw = std::min(W, std::max(1, static_cast<int>(std::llround(x1 - x0))));
    int bx = static_cast<int>(std::llround(x0));
    bx = std::min(std::max(bx, 0), W - bw);
    return {bx, by, bw, bh};
}

Image apply_crop(const Image& full, const CropBox& box, int H, int W) {
    check(box.w >= 1 && box.h >= 1, "apply_crop: empty box");
    check(box.x0 >= 0 && box.y0 >= 0 && box.x0 + box.w <= full.width &&
              box.y0 + box.h <= full.height,
          "apply_crop: box outside frame");
    Image out(H, W, full.channels);
    for (int y = 0; y < H; ++y) {
        int sy = box.y0 + (y * box.h) / H;
        for (int x = 0; x < W; ++x) {
            int sx = box.x0 + (x * box.w) / W;
            for (int c = 0; c < full.channels; ++c) out.at(y, x, c) = full.at(sy, sx, c);
        }
    }
    return out;
}

namespace {

std::vector<std::uint8_t> crop_parts(const std::vector<std::uint8_t>& parts, int fullH,
                                     int fullW, const CropBox& box, int H, int W) {
    std::vector<std::uint8_t> out(static_cast<size_t>(H) * W, 0);
    for (int y = 0; y < H; ++y) {
        int sy = box.y0 + (y * box.h) / H;
        for (int x = 0; x < W; ++x) {
            int sx = box.x0 + (x * box.w) / W;
            out[static_cast<size_t>(y) * W + x] =
                parts[static_cast<size_t>(sy) * fullW + sx];
        }
    }
    (void)fullH;
    return out;
}

} // namespace

RenderedSample render(const CharacterSpec& ch, const SceneSpec& scene, Domain domain,
                      int H, int W) {
    ch.validate();
    scene.validate();
    check_resolution(H, W);

    // The figure is rasterized unflipped on an empty canvas; scene.flip then
    // mirrors the figure buffers column-exactly, and the (screen-anchored)
    // background is composited underneath afterwards.
    FigureGeom g = figure_geometry(scene, H, W);
    Canvas canvas(H, W);

    const double s = g.s;
    const double r = g.head_r;
    const bool style_b = domain == Domain::styleB;

    // Figure-space coordinates (H-units, pelvis origin) for patterns and the
    // styleB vertical shading gradient.
    auto fig_y = [&](double py) { return (py - g.pelvis.y) / s; };
    auto fig_x = [&](double px) { return (px - g.pelvis.x) / s; };
    auto shade_of = [&](Color c) {
        return Shade([=, this_s = style_b](double, double py) {
            if (!this_s) return c;
            double t = std::min(1.0, std::max(0.0, (0.36 - fig_y(py)) / 0.80));
            double m = 0.80 + 0.20 * t;
            return Color{c.r * m, c.g * m, c.b * m};
        });
    };
    auto flat = [](Color c) {
        return Shade([=](double, double) { return c; });
    };

    const Color skin = kSkinPalette[ch.skin_tone];
    const Color hair = kHairPalette[ch.hair_color];
    const Color top = kTopPalette[ch.top_color];
    const Color bottom = kBottomPalette[ch.bottom_color];
    const Color top_dark{top.r * 0.55, top.g * 0.55, top.b * 0.55};

    // Torso fill with the pattern evaluated in figure space so it scales and
    // mirrors with the figure.
    Shade torso_shade = Shade([&, style_b](double px, double py) {
        Color c = top;
        // Pattern features are floored at two output pixels so they stay
        // legible at the smallest figure scale and resolution.
        if (ch.top_pattern == 1) {
            double band_w = std::max(0.055, 2.0 / s);
            long band = static_cast<long>(std::floor(fig_y(py) / band_w));
            if (band & 1) c = top_dark;
        } else if (ch.top_pattern == 2) {
            double rad = std::max(0.028, 2.0 / s);
            double cell = 3.0 * rad;
            double xf = fig_x(px), yf = fig_y(py);
            long cxi = static_cast<long>(std::floor(xf / cell));
            long cyi = static_cast<long>(std::floor(yf / cell));
            if (((cxi + cyi) & 1) == 0) {
                double dx = xf - (cxi + 0.5) * cell, dy = yf - (cyi + 0.5) * cell;
                if (dx * dx + dy * dy <= rad * rad) c = top_dark;
            }
        }
        if (style_b) {
            double t = std::min(1.0, std::max(0.0, (0.36 - fig_y(py)) / 0.80));
            double m = 0.80 + 0.20 * t;
            c = {c.r * m, c.g * m, c.b * m};
        }
        return c;
    });

    // Painter order: legs, feet, torso, arms, hands, neck, head, hair,
    // accessory, face.
    draw_capsule(canvas, g.hip_l, g.kn_l, kLegR * s, Part::leg, shade_of(bottom));
    draw_capsule(canvas, g.kn_l, g.an_l, kLegR * s, Part::leg, shade_of(bottom));
    draw_capsule(canvas, g.hip_r, g.kn_r, kLegR * s, Part::leg, shade_of(bottom));
    draw_capsule(canvas, g.kn_r, g.an_r, kLegR * s, Part::leg, shade_of(bottom));
    draw_disc(canvas, g.an_l.x, g.an_l.y, kFootR * s, Part::foot, shade_of(kShoe));
    draw_disc(canvas, g.an_r.x, g.an_r.y, kFootR * s, Part::foot, shade_of(kShoe));
    draw_quad(canvas, {g.sh_l, g.sh_r, g.hip_r, g.hip_l}, Part::torso, torso_shade);
    draw_capsule(canvas, g.sh_l, g.el_l, kArmR * s, Part::arm, shade_of(top));
    draw_capsule(canvas, g.el_l, g.wr_l, kArmR * s, Part::arm, shade_of(top));
    draw_capsule(canvas, g.sh_r, g.el_r, kArmR * s, Part::arm, shade_of(top));
    draw_capsule(canvas, g.el_r, g.wr_r, kArmR * s, Part::arm, shade_of(top));
    draw_disc(canvas, g.wr_l.x, g.wr_l.y, kHandR * s, Part::hand, shade_of(skin));
    draw_disc(canvas, g.wr_r.x, g.wr_r.y, kHandR * s, Part::hand, shade_of(skin));
    draw_capsule(canvas, g.neck, Pt{(g.neck.x + g.head.x) / 2, (g.neck.y + g.head.y) / 2},
                 kNeckR * s, Part::neck, shade_of(skin));
    draw_disc(canvas, g.head.x, g.head.y, r, Part::head, shade_of(skin));

    // Hair: cap + asymmetric fringe on every style, then style extras. Sides
    // are fixed in figure space (fringe left, ponytail right); the flip mirror
    // swaps them on screen.
    const double hx = g.head.x, hy = g.head.y;
    {
        Shade hs = shade_of(hair);
        // cap: upper part of an enlarged disc
        int y0 = std::max(0, static_cast<int>(std::floor(hy - 1.2 * r - 1)));
        int y1 = std::min(H - 1, static_cast<int>(std::ceil(hy - 0.10 * r + 1)));
        int x0 = std::max(0, static_cast<int>(std::floor(hx - 1.2 * r - 1)));
        int x1 = std::min(W - 1, static_cast<int>(std::ceil(hx + 1.2 * r + 1)));
        double rr = 1.12 * r * 1.12 * r;
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                double px = x + 0.5, py = y + 0.5;
                double dx = px - hx, dy = py - hy;
                if (py <= hy - 0.10 * r && dx * dx + dy * dy <= rr)
                    canvas.set(y, x, hs(px, py), Part::hair);
            }
        }
        // fringe (screen-left for unflipped figures)
        draw_rect(canvas, hx - 1.05 * r, hy - 0.35 * r, hx - 0.55 * r, hy + 0.40 * r,
                  Part::hair, hs);
        if (ch.hair_style == 1) { // long curtains
            for (double side : {-1.0, 1.0}) {
                double cx0 = hx + side * 0.75 * r, cx1 = hx + side * 1.30 * r;
                draw_rect(canvas, std::min(cx0, cx1), hy - 0.20 * r, std::max(cx0, cx1),
                          hy + 2.50 * r, Part::hair, hs);
            }
        } else if (ch.hair_style == 2) { // ponytail (screen-right unflipped)
            draw_capsule(canvas, Pt{hx + 0.80 * r, hy - 0.35 * r},
                         Pt{hx + 1.35 * r, hy + 0.45 * r}, 0.22 * r, Part::hair, hs);
            draw_disc(canvas, hx + 1.40 * r, hy + 0.55 * r, 0.52 * r, Part::hair, hs);
        } else if (ch.hair_style == 3) { // buns
            draw_disc(canvas, hx - 0.95 * r, hy - 0.95 * r, 0.48 * r, Part::hair, hs);
            draw_disc(canvas, hx + 0.95 * r, hy - 0.95 * r, 0.48 * r, Part::hair, hs);
        }
    }

    if (ch.accessory == 1) { // hat
        draw_rect(canvas, hx - 1.25 * r, hy - 1.25 * r, hx + 1.25 * r, hy - 0.95 * r,
                  Part::accessory, shade_of(kHat));
        draw_rect(canvas, hx - 0.75 * r, hy - 1.85 * r, hx + 0.75 * r, hy - 1.25 * r,
                  Part::accessory, shade_of(kHat));
    } else if (ch.accessory == 2) { // scarf
        draw_capsule(canvas, Pt{g.neck.x - 0.60 * r, g.neck.y},
                     Pt{g.neck.x + 0.60 * r, g.neck.y}, 0.28 * r, Part::accessory,
                     shade_of(kScarf));
    }

    // Face features; sizes have pixel floors so expressions stay identifiable
    // at the smallest resolutions and scales.
    {
        double eye_r = std::max(0.10 * r, 0.9);
        double stroke = std::max(0.055 * r, 0.7);
        Shade dark = flat(kFeatureDark);
        draw_disc(canvas, hx - 0.38 * r, hy - 0.18 * r, eye_r, Part::face, dark);
        draw_disc(canvas, hx + 0.38 * r, hy - 0.18 * r, eye_r, Part::face, dark);
        switch (scene.expression_id) {
            case 0: // neutral
                draw_capsule(canvas, Pt{hx - 0.30 * r, hy + 0.42 * r},
                             Pt{hx + 0.30 * r, hy + 0.42 * r}, stroke, Part::face, dark);
                break;
            case 1: // happy: smile + blush dots
                draw_capsule(canvas, Pt{hx - 0.34 * r, hy + 0.30 * r},
                             Pt{hx, hy + 0.50 * r}, stroke, Part::face, dark);
                draw_capsule(canvas, Pt{hx, hy + 0.50 * r},
                             Pt{hx + 0.34 * r, hy + 0.30 * r}, stroke, Part::face, dark);
                draw_disc(canvas, hx - 0.55 * r, hy + 0.25 * r, std::max(0.12 * r, 1.0),
                          Part::face, flat(kBlush));
                draw_disc(canvas, hx + 0.55 * r, hy + 0.25 * r, std::max(0.12 * r, 1.0),
                          Part::face, flat(kBlush));
                break;
            case 2: // sad: frown + tear on the fringe side
                draw_capsule(canvas, Pt{hx - 0.30 * r, hy + 0.52 * r},
                             Pt{hx, hy + 0.36 * r}, stroke, Part::face, dark);
                draw_capsule(canvas, Pt{hx, hy + 0.36 * r},
                             Pt{hx + 0.30 * r, hy + 0.52 * r}, stroke, Part::face, dark);
                draw_disc(canvas, hx - 0.38 * r, hy + 0.12 * r,
                          std::max(0.10 * r, 1.0), Part::face, flat(kTear));
                break;
            default: // surprised: round mouth + raised brows
                draw_disc(canvas, hx, hy + 0.45 * r, std::max(0.14 * r, 1.2), Part::face,
                          dark);
                draw_capsule(canvas, Pt{hx - 0.54 * r, hy - 0.48 * r},
                             Pt{hx - 0.22 * r, hy - 0.48 * r}, std::max(0.05 * r, 0.7),
                             Part::face, dark);
                draw_capsule(canvas, Pt{hx + 0.22 * r, hy - 0.48 * r},
                             Pt{hx + 0.54 * r, hy - 0.48 * r}, std::max(0.05 * r, 0.7),
                             Part::face, dark);
                break;
        }
    }

    // Pose skeleton on black, limbs color-coded by anatomical side.
    Canvas pose(H, W);
    {
        double pr = std::max(0.014 * H * scene.scale(), 1.0);
        Shade torso_c = flat({0.92, 0.92, 0.92});
        Shade head_c = flat({0.90, 0.15, 0.15});
        Shade arm_l = flat({0.15, 0.85, 0.25});
        Shade arm_r = flat({0.10, 0.45, 0.90});
        Shade leg_l = flat({0.90, 0.80, 0.15});
        Shade leg_r = flat({0.85, 0.30, 0.75});
        draw_capsule(pose, g.pelvis, g.neck, pr, Part::torso, torso_c);
        draw_disc(pose, g.head.x, g.head.y, 0.45 * r, Part::head, head_c);
        draw_capsule(pose, g.sh_l, g.el_l, pr, Part::arm, arm_l);
        draw_capsule(pose, g.el_l, g.wr_l, pr, Part::arm, arm_l);
        draw_capsule(pose, g.sh_r, g.el_r, pr, Part::arm, arm_r);
        draw_capsule(pose, g.el_r, g.wr_r, pr, Part::arm, arm_r);
        draw_capsule(pose, g.hip_l, g.kn_l, pr, Part::leg, leg_l);
        draw_capsule(pose, g.kn_l, g.an_l, pr, Part::leg, leg_l);
        draw_capsule(pose, g.hip_r, g.kn_r, pr, Part::leg, leg_r);
        draw_capsule(pose, g.kn_r, g.an_r, pr, Part::leg, leg_r);
    }

    // Column-exact mirror of the figure and skeleton buffers. Being a pure
    // pixel permutation, this makes the flipped render the bitwise mirror of
    // the unflipped one.
    if (scene.flip) {
        auto mirror = [&](Canvas& c) {
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W / 2; ++x) {
                    size_t a = static_cast<size_t>(y) * W + x;
                    size_t b = static_cast<size_t>(y) * W + (W - 1 - x);
                    std::swap(c.part[a], c.part[b]);
                    for (int ch3 = 0; ch3 < 3; ++ch3)
                        std::swap(c.rgb[a * 3 + ch3], c.rgb[b * 3 + ch3]);
                }
            }
        };
        mirror(canvas);
        mirror(pose);
    }

    // Domain finish: styleA gets a dark silhouette outline, styleB gets
    // per-pixel texture noise on the figure.
    if (domain == Domain::styleA) {
        std::vector<std::uint8_t> before = canvas.part;
        auto is_bg = [&](int y, int x) {
            if (y < 0 || y >= H || x < 0 || x >= W) return false; // frame edge: no rim
            return before[static_cast<size_t>(y) * W + x] == 0;
        };
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                if (before[static_cast<size_t>(y) * W + x] == 0) continue;
                if (is_bg(y - 1, x) || is_bg(y + 1, x) || is_bg(y, x - 1) ||
                    is_bg(y, x + 1)) {
                    size_t i = (static_cast<size_t>(y) * W + x) * 3;
                    canvas.rgb[i + 0] = kOutline.r;
                    canvas.rgb[i + 1] = kOutline.g;
                    canvas.rgb[i + 2] = kOutline.b;
                }
            }
        }
    } else {
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                size_t i = static_cast<size_t>(y) * W + x;
                if (canvas.part[i] == 0) continue;
                double n = (noise01(static_cast<std::uint64_t>(scene.noise_seed), i, 13) -
                            0.5) *
                           0.06;
                for (int c = 0; c < 3; ++c)
                    canvas.rgb[i * 3 + c] = clamp01(canvas.rgb[i * 3 + c] + n);
            }
        }
    }

    // Assemble full-frame images (background under uncovered pixels), then
    // crop.
    Image bg = render_background(scene.background_id, domain, H, W, scene.noise_seed);
    Image img_full(H, W, 3);
    Image pose_full(H, W, 3);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            size_t i = static_cast<size_t>(y) * W + x;
            bool uncovered = canvas.part[i] == 0;
            for (int c = 0; c < 3; ++c) {
                img_full.at(y, x, c) = uncovered
                                           ? bg.at(y, x, c)
                                           : static_cast<float>(canvas.rgb[i * 3 + c]);
                pose_full.at(y, x, c) = static_cast<float>(pose.rgb[i * 3 + c]);
            }
        }
    }

    CropBox box = crop_box(scene, H, W);
    RenderedSample out;
    out.character = ch;
    out.scene = scene;
    out.domain = domain;
    out.height = H;
    out.width = W;
    out.image = apply_crop(img_full, box, H, W);
    out.pose_map = apply_crop(pose_full, box, H, W);
    out.parts = crop_parts(canvas.part, H, W, box, H, W);
    out.bg_mask = Image(H, W, 1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            out.bg_mask.at(y, x, 0) =
                out.parts[static_cast<size_t>(y) * W + x] == 0 ? 1.0f : 0.0f;

    // Head-disc box mapped through the mirror and the crop.
    double hx_eff = scene.flip ? W - g.head.x : g.head.x;
    double bx0 = (hx_eff - r - box.x0) * W / box.w;
    double bx1 = (hx_eff + r - box.x0) * W / box.w;
    double by0 = (g.head.y - r - box.y0) * H / box.h;
    double by1 = (g.head.y + r - box.y0) * H / box.h;
    double nominal = (bx1 - bx0) * (by1 - by0);
    out.head_box.x0 = std::min(std::max(bx0, 0.0), static_cast<double>(W));
    out.head_box.x1 = std::min(std::max(bx1, 0.0), static_cast<double>(W));
    out.head_box.y0 = std::min(std::max(by0, 0.0), static_cast<double>(H));
    out.head_box.y1 = std::min(std::max(by1, 0.0), static_cast<double>(H));
    double vis_area = std::max(0.0, out.head_box.x1 - out.head_box.x0) *
                      std::max(0.0, out.head_box.y1 - out.head_box.y0);
    out.head_box.visible = nominal > 0 && vis_area >= 0.2 * nominal;
    return out;
}

CharacterSpec random_character(Rng& rng) {
    CharacterSpec ch;
    ch.hair_color = static_cast<int>(rng.uniform_int(kHairColors));
    ch.hair_style = static_cast<int>(rng.uniform_int(kHairStyles));
    ch.skin_tone = static_cast<int>(rng.uniform_int(kSkinTones));
    ch.top_color = static_cast<int>(rng.uniform_int(kTopColors));
    ch.top_pattern = static_cast<int>(rng.uniform_int(kTopPatterns));
    ch.bottom_color = static_cast<int>(rng.uniform_int(kBottomColors));
    ch.accessory = static_cast<int>(rng.uniform_int(kAccessories));
    return ch;
}

SceneSpec sample_scene(Rng& rng, bool exclude_standard) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
        SceneSpec s;
        s.pose_id = static_cast<int>(rng.uniform_int(kPoses));
        s.background_id = static_cast<int>(rng.uniform_int(kBackgrounds));
        s.expression_id = static_cast<int>(rng.uniform_int(kExpressions));
        s.scale_id = static_cast<int>(rng.uniform_int(kScales));
        s.flip = rng.uniform_int(2) == 1;
        s.crop_mode = static_cast<CropMode>(rng.uniform_int(kCropModes));
        s.noise_seed = static_cast<std::int64_t>(rng.next_u64() & 0xffffffffull);
        if (!exclude_standard || !s.is_standard_visible()) return s;
    }
    throw ValidationError("sample_scene: rejection sampling failed"); // unreachable
}

PairSample sample_pair(const CharacterSpec& ch, std::uint64_t seed, Domain domain,
                       int H, int W) {
    Rng r = Rng(seed).fork("pair");
    SceneSpec ref_scene = sample_scene(r, /*exclude_standard=*/true);
    PairSample p;
    p.reference = render(ch, ref_scene, domain, H, W);
    p.target = render(ch, std_scene(), domain, H, W);
    return p;
}

} // namespace charpipe
