#pragma once

#include <string>

#include <json.hpp>

#include "charpipe/render.hpp"

namespace charpipe {

// Viewpoint = one id per (scale, flip, crop) combination.
inline constexpr int kViewpoints = kScales * 2 * kCropModes;

int viewpoint_id_of(int scale_id, bool flip, CropMode crop);
void viewpoint_decompose(int viewpoint_id, int& scale_id, bool& flip, CropMode& crop);

// Discrete text-prompt stand-in: four factor ids, each embedded as one prompt
// token by the generator. The factor ids double as exact ground truth for the
// controllability metric.
struct PromptCondition {
    int action_id = 0;     // pose vocabulary
    int background_id = 0;
    int expression_id = 0;
    int viewpoint_id = 0;  // (scale, flip, crop) combination

    bool operator==(const PromptCondition&) const = default;
    void validate() const;
};

PromptCondition prompt_from_scene(const SceneSpec& scene);
// Scene realizing the prompt exactly; noise_seed is free (not prompted).
SceneSpec scene_from_prompt(const PromptCondition& prompt, std::int64_t noise_seed);

nlohmann::json prompt_to_json(const PromptCondition& p);
PromptCondition prompt_from_json(const nlohmann::json& j);

} // namespace charpipe
