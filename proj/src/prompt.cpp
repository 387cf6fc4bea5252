#include "charpipe/prompt.hpp"

#include "charpipe/common.hpp"

namespace charpipe {

int viewpoint_id_of(int scale_id, bool flip, CropMode crop) {
    check(scale_id >= 0 && scale_id < kScales, "viewpoint: scale_id out of range");
    return (scale_id * 2 + (flip ? 1 : 0)) * kCropModes + static_cast<int>(crop);
}

void viewpoint_decompose(int viewpoint_id, int& scale_id, bool& flip, CropMode& crop) {
    check(viewpoint_id >= 0 && viewpoint_id < kViewpoints,
          "viewpoint_id out of range [0, " + std::to_string(kViewpoints) +
              "): got " + std::to_string(viewpoint_id));
    crop = static_cast<CropMode>(viewpoint_id % kCropModes);
    int sf = viewpoint_id / kCropModes;
    flip = (sf % 2) == 1;
    scale_id = sf / 2;
}

void PromptCondition::validate() const {
    auto in_range = [](int v, int n, const char* field) {
        if (v < 0 || v >= n)
            throw ValidationError(std::string("PromptCondition.") + field +
                                  " out of range [0, " + std::to_string(n) +
                                  "): got " + std::to_string(v));
    };
    in_range(action_id, kPoses, "action_id");
    in_range(background_id, kBackgrounds, "background_id");
    in_range(expression_id, kExpressions, "expression_id");
    in_range(viewpoint_id, kViewpoints, "viewpoint_id");
}

PromptCondition prompt_from_scene(const SceneSpec& scene) {
    scene.validate();
    PromptCondition p;
    p.action_id = scene.pose_id;
    p.background_id = scene.background_id;
    p.expression_id = scene.expression_id;
    p.viewpoint_id = viewpoint_id_of(scene.scale_id, scene.flip, scene.crop_mode);
    return p;
}

SceneSpec scene_from_prompt(const PromptCondition& prompt, std::int64_t noise_seed) {
    prompt.validate();
    SceneSpec s;
    s.pose_id = prompt.action_id;
    s.background_id = prompt.background_id;
    s.expression_id = prompt.expression_id;
    viewpoint_decompose(prompt.viewpoint_id, s.scale_id, s.flip, s.crop_mode);
    s.noise_seed = noise_seed;
    return s;
}

nlohmann::json prompt_to_json(const PromptCondition& p) {
    return {{"action_id", p.action_id},
            {"background_id", p.background_id},
            {"expression_id", p.expression_id},
            {"viewpoint_id", p.viewpoint_id}};
}

PromptCondition prompt_from_json(const nlohmann::json& j) {
    PromptCondition p;
    for (const char* key : {"action_id", "background_id", "expression_id", "viewpoint_id"})
        if (!j.contains(key) || !j.at(key).is_number_integer())
            throw ValidationError(std::string("prompt JSON: missing integer field '") +
                                  key + "'");
    p.action_id = j.at("action_id").get<int>();
    p.background_id = j.at("background_id").get<int>();
    p.expression_id = j.at("expression_id").get<int>();
    p.viewpoint_id = j.at("viewpoint_id").get<int>();
    p.validate();
    return p;
}

} // namespace charpipe
