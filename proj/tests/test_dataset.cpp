#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "charpipe/dataset.hpp"
#include "charpipe/hashing.hpp"
#include "test_util.hpp"

using namespace charpipe;
using charpipe::testutil::TempDir;
namespace fs = std::filesystem;

TEST_CASE("dataset generation writes the full layout and counts") {
    TempDir tmp("dataset_layout");
    DatasetManifest m =
        generate_dataset(2, 3, Domain::styleA, tmp.str(), 99, 48, 32);
    CHECK(m.records.size() == 6);
    std::set<int> char_ids;
    for (const auto& r : m.records) {
        char_ids.insert(r.char_id);
        std::string base = (fs::path(tmp.str()) / r.sample_id).string();
        CHECK(fs::exists(base + ".img.png"));
        CHECK(fs::exists(base + ".mask.png"));
        CHECK(fs::exists(base + ".pose.png"));
        CHECK(fs::exists(base + ".meta.json"));
        CHECK_FALSE(r.scene.is_standard_visible());
    }
    CHECK(char_ids.size() == 2);
    CHECK(fs::exists(fs::path(tmp.str()) / "manifest.json"));

    DatasetManifest loaded = load_manifest(tmp.str());
    CHECK(loaded.records.size() == 6);
    CHECK(loaded.content_sha256 == m.content_sha256);
    CHECK(loaded.domain == Domain::styleA);

    // Stored images round trip through the record loader.
    RecordImages imgs = load_record_images(tmp.str(), loaded.records[0]);
    CHECK(imgs.image.height == 48);
    CHECK(imgs.image.channels == 3);
    CHECK(imgs.mask.channels == 1);
    for (float v : imgs.mask.data) CHECK((v == 0.0f || v == 1.0f));

    // The stored mask matches a fresh render of the same record exactly.
    RenderedSample re = render(loaded.records[0].character, loaded.records[0].scene,
                               loaded.records[0].domain, 48, 32);
    CHECK(images_identical(imgs.mask, re.bg_mask));
}

TEST_CASE("meta files carry every attribute and scene field") {
    TempDir tmp("dataset_meta");
    DatasetManifest m =
        generate_dataset(1, 1, Domain::styleB, tmp.str(), 5, 48, 32,
                         SceneMode::full_uniform);
    std::ifstream f(fs::path(tmp.str()) / (m.records[0].sample_id + ".meta.json"));
    REQUIRE(f.good());
    nlohmann::json j;
    f >> j;
    for (const char* key :
         {"sample_id", "char_id", "hair_color", "hair_style", "skin_tone", "top_color",
          "top_pattern", "bottom_color", "accessory", "pose_id", "background_id",
          "expression_id", "scale", "flip", "crop_mode", "noise_seed", "domain",
          "height", "width"}) {
        INFO(key);
        CHECK(j.contains(key));
    }
    DatasetRecord rt = record_from_json(j);
    CHECK(rt.sample_id == m.records[0].sample_id);
    CHECK(rt.character == m.records[0].character);
    CHECK(rt.scene == m.records[0].scene);
}

TEST_CASE("same seed regenerates an identical manifest hash, new seed differs") {
    TempDir a("dataset_hash_a"), b("dataset_hash_b"), c("dataset_hash_c");
    DatasetManifest ma = generate_dataset(3, 2, Domain::styleA, a.str(), 7, 48, 32);
    DatasetManifest mb = generate_dataset(3, 2, Domain::styleA, b.str(), 7, 48, 32);
    DatasetManifest mc = generate_dataset(3, 2, Domain::styleA, c.str(), 8, 48, 32);
    CHECK(ma.content_sha256 == mb.content_sha256);
    CHECK(ma.content_sha256 != mc.content_sha256);
    // File bytes are identical too.
    for (const auto& r : ma.records) {
        std::string rel = r.sample_id + ".img.png";
        CHECK(sha256_file((fs::path(a.str()) / rel).string()) ==
              sha256_file((fs::path(b.str()) / rel).string()));
    }
}

TEST_CASE("character split is disjoint at 80/20") {
    TempDir tmp("dataset_split");
    DatasetManifest m = generate_dataset(10, 2, Domain::styleA, tmp.str(), 3, 48, 32);
    DatasetSplit split = split_by_character(m);
    CHECK(split.train_indices.size() == 16);
    CHECK(split.test_indices.size() == 4);
    std::set<int> train_chars, test_chars;
    for (size_t i : split.train_indices) train_chars.insert(m.records[i].char_id);
    for (size_t i : split.test_indices) test_chars.insert(m.records[i].char_id);
    CHECK(train_chars.size() == 8);
    CHECK(test_chars.size() == 2);
    for (int id : test_chars) CHECK(train_chars.count(id) == 0);
}

TEST_CASE("tampered manifests and broken layouts are rejected") {
    TempDir tmp("dataset_tamper");
    generate_dataset(2, 1, Domain::styleA, tmp.str(), 11, 48, 32);
    // Corrupt one record field.
    fs::path mpath = fs::path(tmp.str()) / "manifest.json";
    std::ifstream in(mpath);
    nlohmann::json j;
    in >> j;
    in.close();
    j["records"][0]["pose_id"] = (j["records"][0]["pose_id"].get<int>() + 1) % 12;
    std::ofstream out(mpath, std::ios::trunc);
    out << j.dump(2);
    out.close();
    CHECK_THROWS_WITH_AS(load_manifest(tmp.str()), doctest::Contains("hash"),
                         ValidationError);
    CHECK_THROWS_AS(load_manifest(tmp.str() + "/nope"), DependencyError);
}

TEST_CASE("full-uniform mode allows the standardized scene") {
    TempDir tmp("dataset_uniform");
    DatasetManifest m = generate_dataset(40, 2, Domain::styleB, tmp.str(), 21, 48, 32,
                                         SceneMode::full_uniform);
    CHECK(m.scene_mode == SceneMode::full_uniform);
    // With 80 uniform scenes, pose coverage is near-certain.
    std::set<int> poses;
    for (const auto& r : m.records) poses.insert(r.scene.pose_id);
    CHECK_GT(poses.size(), 8);
}
