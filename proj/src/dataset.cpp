#include "charpipe/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "charpipe/common.hpp"
#include "charpipe/hashing.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace charpipe {

std::string to_string(SceneMode m) {
    return m == SceneMode::nonstandard ? "nonstandard" : "full_uniform";
}

SceneMode scene_mode_from_string(const std::string& s) {
    if (s == "nonstandard") return SceneMode::nonstandard;
    if (s == "full_uniform") return SceneMode::full_uniform;
    throw ValidationError("scene_mode: unknown value '" + s + "'");
}

json record_to_json(const DatasetRecord& r) {
    return json{{"sample_id", r.sample_id},
                {"char_id", r.char_id},
                {"hair_color", r.character.hair_color},
                {"hair_style", r.character.hair_style},
                {"skin_tone", r.character.skin_tone},
                {"top_color", r.character.top_color},
                {"top_pattern", r.character.top_pattern},
                {"bottom_color", r.character.bottom_color},
                {"accessory", r.character.accessory},
                {"pose_id", r.scene.pose_id},
                {"background_id", r.scene.background_id},
                {"expression_id", r.scene.expression_id},
                {"scale", r.scene.scale()},
                {"flip", r.scene.flip},
                {"crop_mode", to_string(r.scene.crop_mode)},
                {"noise_seed", r.scene.noise_seed},
                {"domain", to_string(r.domain)},
                {"height", r.height},
                {"width", r.width}};
}

namespace {

int scale_id_from_value(double v) {
    for (int i = 0; i < kScales; ++i)
        if (v == kScaleValues[i]) return i;
    throw ValidationError("SceneSpec.scale: unknown value " + std::to_string(v));
}

template <typename T>
T get_field(const json& j, const char* key) {
    if (!j.contains(key)) {
        throw ValidationError(std::string("dataset record: missing field '") + key + "'");
    }
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError(std::string("dataset record: field '") + key +
                              "' has the wrong type");
    }
}

} // namespace

DatasetRecord record_from_json(const json& j) {
    DatasetRecord r;
    r.sample_id = get_field<std::string>(j, "sample_id");
    r.char_id = get_field<int>(j, "char_id");
    r.character.hair_color = get_field<int>(j, "hair_color");
    r.character.hair_style = get_field<int>(j, "hair_style");
    r.character.skin_tone = get_field<int>(j, "skin_tone");
    r.character.top_color = get_field<int>(j, "top_color");
    r.character.top_pattern = get_field<int>(j, "top_pattern");
    r.character.bottom_color = get_field<int>(j, "bottom_color");
    r.character.accessory = get_field<int>(j, "accessory");
    r.scene.pose_id = get_field<int>(j, "pose_id");
    r.scene.background_id = get_field<int>(j, "background_id");
    r.scene.expression_id = get_field<int>(j, "expression_id");
    r.scene.scale_id = scale_id_from_value(get_field<double>(j, "scale"));
    r.scene.flip = get_field<bool>(j, "flip");
    r.scene.crop_mode = crop_mode_from_string(get_field<std::string>(j, "crop_mode"));
    r.scene.noise_seed = get_field<std::int64_t>(j, "noise_seed");
    r.domain = domain_from_string(get_field<std::string>(j, "domain"));
    r.height = get_field<int>(j, "height");
    r.width = get_field<int>(j, "width");
    r.character.validate();
    r.scene.validate();
    return r;
}

namespace {

std::string records_digest(const std::vector<DatasetRecord>& records) {
    json arr = json::array();
    for (const auto& r : records) arr.push_back(record_to_json(r));
    return sha256_hex(arr.dump());
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DependencyError("cannot open for writing: " + path);
    f << text;
    f.flush();
    if (!f) throw DependencyError("write failed: " + path);
}

Image mask_to_storage(const Image& mask) {
    Image out(mask.height, mask.width, 1);
    for (size_t i = 0; i < mask.data.size(); ++i)
        out.data[i] = mask.data[i] >= 0.5f ? 1.0f : 0.0f;
    return out;
}

} // namespace

DatasetManifest generate_dataset(int n_chars, int scenes_per_char, Domain domain,
                                 const std::string& out_dir, std::uint64_t seed,
                                 int H, int W, SceneMode scene_mode) {
    check(n_chars >= 1, "generate_dataset: n_chars must be positive");
    check(scenes_per_char >= 1, "generate_dataset: scenes_per_char must be positive");

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DependencyError("cannot create dataset directory " + out_dir);

    DatasetManifest m;
    m.domain = domain;
    m.height = H;
    m.width = W;
    m.seed = seed;
    m.scene_mode = scene_mode;
    m.n_chars = n_chars;
    m.scenes_per_char = scenes_per_char;

    Rng root(seed);
    std::vector<std::string> written;
    auto cleanup = [&]() {
        for (const auto& p : written) {
            std::error_code rec_ec;
            fs::remove(p, rec_ec);
        }
    };

    try {
        for (int ci = 0; ci < n_chars; ++ci) {
            CharacterSpec ch;
            {
                Rng cr = root.fork("char", static_cast<std::uint64_t>(ci));
                ch = random_character(cr);
            }
            for (int si = 0; si < scenes_per_char; ++si) {
                std::uint64_t k =
                    static_cast<std::uint64_t>(ci) * static_cast<std::uint64_t>(scenes_per_char) +
                    static_cast<std::uint64_t>(si);
                Rng sr = root.fork("scene", k);
                SceneSpec scene =
                    sample_scene(sr, scene_mode == SceneMode::nonstandard);

                DatasetRecord rec;
                char buf[64];
                std::snprintf(buf, sizeof buf, "%s_c%05d_s%04d",
                              domain == Domain::styleA ? "a" : "b", ci, si);
                rec.sample_id = buf;
                rec.char_id = ci;
                rec.character = ch;
                rec.scene = scene;
                rec.domain = domain;
                rec.height = H;
                rec.width = W;

                RenderedSample sample = render(ch, scene, domain, H, W);
                std::string base = (fs::path(out_dir) / rec.sample_id).string();
                written.push_back(base + ".img.png");
                write_png(base + ".img.png", sample.image);
                written.push_back(base + ".mask.png");
                write_png(base + ".mask.png", sample.bg_mask);
                written.push_back(base + ".pose.png");
                write_png(base + ".pose.png", sample.pose_map);
                written.push_back(base + ".meta.json");
                write_text(base + ".meta.json", record_to_json(rec).dump(2) + "\n");

                m.records.push_back(std::move(rec));
            }
        }
        m.content_sha256 = records_digest(m.records);

        json manifest{{"format_version", m.format_version},
                      {"domain", to_string(m.domain)},
                      {"height", m.height},
                      {"width", m.width},
                      {"seed", m.seed},
                      {"scene_mode", to_string(m.scene_mode)},
                      {"n_chars", m.n_chars},
                      {"scenes_per_char", m.scenes_per_char},
                      {"content_sha256", m.content_sha256},
                      {"records", json::array()}};
        for (const auto& r : m.records) manifest["records"].push_back(record_to_json(r));
        std::string mpath = (fs::path(out_dir) / "manifest.json").string();
        written.push_back(mpath);
        write_text(mpath, manifest.dump(2) + "\n");
    } catch (...) {
        cleanup();
        throw;
    }
    return m;
}

DatasetManifest load_manifest(const std::string& out_dir) {
    std::string path = (fs::path(out_dir) / "manifest.json").string();
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DependencyError("manifest not found: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ValidationError("manifest is not valid JSON: " + std::string(e.what()));
    }
    DatasetManifest m;
    m.format_version = get_field<int>(j, "format_version");
    if (m.format_version != 1) {
        throw ValidationError("manifest format_version " +
                              std::to_string(m.format_version) + " is not supported");
    }
    m.domain = domain_from_string(get_field<std::string>(j, "domain"));
    m.height = get_field<int>(j, "height");
    m.width = get_field<int>(j, "width");
    m.seed = get_field<std::uint64_t>(j, "seed");
    m.scene_mode = scene_mode_from_string(get_field<std::string>(j, "scene_mode"));
    m.n_chars = get_field<int>(j, "n_chars");
    m.scenes_per_char = get_field<int>(j, "scenes_per_char");
    m.content_sha256 = get_field<std::string>(j, "content_sha256");
    if (!j.contains("records") || !j.at("records").is_array()) {
        throw ValidationError("manifest: missing records array");
    }
    for (const auto& rj : j.at("records")) m.records.push_back(record_from_json(rj));
    std::string digest = records_digest(m.records);
    if (digest != m.content_sha256) {
        throw ValidationError("manifest content hash mismatch: records were modified");
    }
    return m;
}

RecordImages load_record_images(const std::string& out_dir, const DatasetRecord& rec) {
    std::string base = (fs::path(out_dir) / rec.sample_id).string();
    RecordImages out;
    out.image = read_png(base + ".img.png");
    out.mask = mask_to_storage(read_png(base + ".mask.png"));
    out.pose_map = read_png(base + ".pose.png");
    check(out.image.height == rec.height && out.image.width == rec.width,
          "dataset image resolution does not match its record: " + rec.sample_id);
    return out;
}

DatasetSplit split_by_character(const DatasetManifest& manifest, double train_fraction) {
    check(train_fraction > 0.0 && train_fraction < 1.0,
          "split_by_character: train fraction must be in (0, 1)");
    std::vector<int> ids;
    for (const auto& r : manifest.records) ids.push_back(r.char_id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    check(ids.size() >= 2, "split_by_character: need at least two characters");

    size_t n_train = static_cast<size_t>(train_fraction * static_cast<double>(ids.size()));
    n_train = std::min(std::max<size_t>(n_train, 1), ids.size() - 1);
    std::vector<int> train_ids(ids.begin(), ids.begin() + static_cast<long>(n_train));

    DatasetSplit split;
    for (size_t i = 0; i < manifest.records.size(); ++i) {
        bool in_train = std::binary_search(train_ids.begin(), train_ids.end(),
                                           manifest.records[i].char_id);
        (in_train ? split.train_indices : split.test_indices).push_back(i);
    }
    return split;
}

} // namespace charpipe
