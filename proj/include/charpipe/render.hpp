#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "charpipe/image.hpp"
#include "charpipe/rng.hpp"

namespace charpipe {

// Discrete appearance attributes that define a character's identity. Two
// specs describe the same character iff every field matches.
struct CharacterSpec {
    int hair_color = 0;  // 8 values
    int hair_style = 0;  // 4 values
    int skin_tone = 0;   // 4 values
    int top_color = 0;   // 8 values
    int top_pattern = 0; // 3 values: solid, stripes, dots
    int bottom_color = 0; // 8 values
    int accessory = 0;   // 3 values: none, hat, scarf

    bool operator==(const CharacterSpec&) const = default;
    void validate() const; // throws ValidationError naming the bad field
};

inline constexpr int kHairColors = 8;
inline constexpr int kHairStyles = 4;
inline constexpr int kSkinTones = 4;
inline constexpr int kTopColors = 8;
inline constexpr int kTopPatterns = 3;
inline constexpr int kBottomColors = 8;
inline constexpr int kAccessories = 3;

inline constexpr int kPoses = 12;
inline constexpr int kBackgrounds = 8;
inline constexpr int kExpressions = 4;
inline constexpr int kScales = 3;
inline constexpr double kScaleValues[kScales] = {0.7, 1.0, 1.3};

enum class CropMode { full = 0, upper = 1, head_only = 2 };
inline constexpr int kCropModes = 3;
std::string to_string(CropMode m);
CropMode crop_mode_from_string(const std::string& s);

enum class Domain { styleA = 0, styleB = 1 };
std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

// Non-appearance scene elements: pose, background, expression, viewpoint
// (scale/flip/crop) and the texture noise seed.
struct SceneSpec {
    int pose_id = 0;        // 12 values; 0 is the standard pose
    int background_id = 0;  // 8 values; 0 is white
    int expression_id = 0;  // 4 values; 0 is neutral
    int scale_id = 1;       // index into kScaleValues; 1 -> 1.0
    bool flip = false;
    CropMode crop_mode = CropMode::full;
    std::int64_t noise_seed = 0;

    double scale() const { return kScaleValues[scale_id]; }
    bool operator==(const SceneSpec&) const = default;
    void validate() const;
    // True when every scene element matches the standardized scene. The
    // noise seed is ignored: it only perturbs styleB texture.
    bool is_standard_visible() const;
};

// Standardized scene: standard pose, white background, neutral expression,
// scale 1.0, no flip, full frame.
SceneSpec std_scene();

// Per-pixel figure part labels. Background is 0 so a zero-filled canvas
// starts as all-background.
enum class Part : std::uint8_t {
    bg = 0,
    torso,
    arm,
    leg,
    hand,
    foot,
    neck,
    head,
    hair,
    accessory,
    face,
};

struct HeadBox {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0; // pixel coords, x1/y1 exclusive
    bool visible = false;
};

struct RenderedSample {
    Image image;    // H x W x 3, unit interval
    Image bg_mask;  // H x W x 1, exactly 1 on background, 0 on figure
    Image pose_map; // H x W x 3, skeleton strokes on black
    std::vector<std::uint8_t> parts; // H*W part labels
    HeadBox head_box; // tight head-disc box in output pixel coords
    CharacterSpec character;
    SceneSpec scene;
    Domain domain = Domain::styleA;
    int height = 0, width = 0;

    Part part_at(int y, int x) const {
        return static_cast<Part>(parts[static_cast<size_t>(y) * width + x]);
    }
};

struct PairSample {
    RenderedSample reference; // non-standardized scene
    RenderedSample target;    // standardized scene, same character
};

// Source rectangle extracted for a crop mode, in full-frame pixel coords.
struct CropBox {
    int x0 = 0, y0 = 0, w = 0, h = 0;
};

// Pure procedural renderer. Identical arguments produce bitwise-identical
// samples. Resolution must keep the fixed 2:3 width:height aspect with both
// sides >= 32.
RenderedSample render(const CharacterSpec& ch, const SceneSpec& scene, Domain domain,
                      int H, int W);

// Background fill shared by the renderer and by mask-exactness checks:
// the image of a render equals this exactly wherever bg_mask is 1 (after
// applying the same crop box).
Image render_background(int background_id, Domain domain, int H, int W,
                        std::int64_t noise_seed);

// Crop rectangle used by `render` for the given scene at this resolution.
// Depends only on the scene (head anchor and scale), never on the character.
CropBox crop_box(const SceneSpec& scene, int H, int W);

// Nearest-neighbor extraction of `box` from a full-frame image, resized back
// to (H, W). The renderer applies exactly this to image/mask/pose map.
Image apply_crop(const Image& full, const CropBox& box, int H, int W);

// Uniformly sampled character.
CharacterSpec random_character(Rng& rng);

// Uniform scene; when exclude_standard is set, rejects scenes whose visible
// elements all match the standardized scene.
SceneSpec sample_scene(Rng& rng, bool exclude_standard);

// Reference drawn uniformly from non-standard scenes plus the standardized
// target of the same character. Deterministic in (char, seed, domain).
PairSample sample_pair(const CharacterSpec& ch, std::uint64_t seed, Domain domain,
                       int H, int W);

} // namespace charpipe
