#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "charpipe/render.hpp"

namespace charpipe {

// How scenes are drawn when generating a dataset:
//  - nonstandard: uniform over scenes excluding the standardized one
//    (pair-training references),
//  - full_uniform: uniform over all scenes (second-domain training data).
enum class SceneMode { nonstandard = 0, full_uniform = 1 };
std::string to_string(SceneMode m);
SceneMode scene_mode_from_string(const std::string& s);

struct DatasetRecord {
    std::string sample_id;
    int char_id = 0;
    CharacterSpec character;
    SceneSpec scene;
    Domain domain = Domain::styleA;
    int height = 0, width = 0;
};

nlohmann::json record_to_json(const DatasetRecord& r);
DatasetRecord record_from_json(const nlohmann::json& j);

struct DatasetManifest {
    int format_version = 1;
    Domain domain = Domain::styleA;
    int height = 0, width = 0;
    std::uint64_t seed = 0;
    SceneMode scene_mode = SceneMode::nonstandard;
    int n_chars = 0, scenes_per_char = 0;
    std::vector<DatasetRecord> records;
    // SHA-256 of the serialized records array; identical regeneration gives
    // an identical hash.
    std::string content_sha256;
};

// Renders n_chars * scenes_per_char samples into out_dir as
// <sample_id>.img.png / .mask.png / .pose.png / .meta.json plus a
// manifest.json. On failure every file written so far is removed before the
// error propagates.
DatasetManifest generate_dataset(int n_chars, int scenes_per_char, Domain domain,
                                 const std::string& out_dir, std::uint64_t seed,
                                 int H, int W,
                                 SceneMode scene_mode = SceneMode::nonstandard);

DatasetManifest load_manifest(const std::string& out_dir);

struct RecordImages {
    Image image;
    Image mask;     // 1 channel, values 0 or 1
    Image pose_map; // 3 channels
};
RecordImages load_record_images(const std::string& out_dir, const DatasetRecord& rec);

// Deterministic character-disjoint split: the sorted unique character ids
// are partitioned so ~train_fraction of characters (and every record of
// theirs) land in train.
struct DatasetSplit {
    std::vector<size_t> train_indices;
    std::vector<size_t> test_indices;
};
DatasetSplit split_by_character(const DatasetManifest& manifest,
                                double train_fraction = 0.8);

} // namespace charpipe
