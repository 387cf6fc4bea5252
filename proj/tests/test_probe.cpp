#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "charpipe/checkpoint.hpp"
#include "charpipe/metrics.hpp"
#include "charpipe/prompt.hpp"
#include "test_util.hpp"

using namespace charpipe;
using charpipe::testutil::TempDir;

namespace {

constexpr int kH = 48, kW = 32;

struct ProbeFixture {
    AttributeProbe probe;
    std::vector<ProbeSample> held;
};

// One gated probe shared by every test in this binary; training it is the
// expensive step, so it happens exactly once.
const ProbeFixture& fixture() {
    static ProbeFixture f = [] {
        const int chars = 700, scenes = 4, held_chars = 100;
        std::vector<ProbeSample> all =
            render_probe_dataset(chars, scenes, kH, kW, 7001);
        size_t split = static_cast<size_t>(chars - held_chars) * scenes;
        std::vector<ProbeSample> train(all.begin(), all.begin() + split);
        std::vector<ProbeSample> held(all.begin() + split, all.end());
        ProbeConfig cfg;
        AttributeProbe probe = train_probe(train, held, cfg);
        return ProbeFixture{std::move(probe), std::move(held)};
    }();
    return f;
}

// A character differing from `a` in every attribute.
CharacterSpec all_different(const CharacterSpec& a) {
    CharacterSpec b;
    b.hair_color = (a.hair_color + 1) % kHairColors;
    b.hair_style = (a.hair_style + 1) % kHairStyles;
    b.skin_tone = (a.skin_tone + 1) % kSkinTones;
    b.top_color = (a.top_color + 1) % kTopColors;
    b.top_pattern = (a.top_pattern + 1) % kTopPatterns;
    b.bottom_color = (a.bottom_color + 1) % kBottomColors;
    b.accessory = (a.accessory + 1) % kAccessories;
    return b;
}

// Scene with every visible factor at a judgeable setting (full frame).
SceneSpec eval_scene(int pose, int bg, int expr, int scale_id, bool flip,
                     std::int64_t noise = 11) {
    SceneSpec s;
    s.pose_id = pose;
    s.background_id = bg;
    s.expression_id = expr;
    s.scale_id = scale_id;
    s.flip = flip;
    s.crop_mode = CropMode::full;
    s.noise_seed = noise;
    return s;
}

} // namespace

TEST_CASE("trained probe passes every gate on held-out characters") {
    const ProbeFixture& f = fixture();
    CHECK(f.probe.gated());
    const ProbeEval& e = f.probe.gate_eval();
    CHECK(e.n == static_cast<int>(f.held.size()));
    for (const ProbeHead& h : probe_heads()) {
        INFO("head ", h.name);
        CHECK(e.head_n.at(h.name) > 0);
        CHECK(e.head_accuracy.at(h.name) >= 0.95);
    }
    CHECK(e.fg_iou >= 0.90);
    CHECK(e.head_iou >= 0.50);

    // The stored gate measurement is reproducible on the same samples.
    ProbeEval again = evaluate_probe(f.probe, f.held);
    CHECK(again.fg_iou == e.fg_iou);
    CHECK(again.head_accuracy == e.head_accuracy);
}

TEST_CASE("probe inference is deterministic") {
    const ProbeFixture& f = fixture();
    const Image& img = f.held.front().image;
    auto c1 = f.probe.classify(img);
    auto c2 = f.probe.classify(img);
    CHECK(c1 == c2);
    std::vector<real> e1 = f.probe.embedding(img);
    std::vector<real> e2 = f.probe.embedding(img);
    CHECK(e1 == e2);
    CHECK(images_identical(f.probe.predict_bg_mask(img), f.probe.predict_bg_mask(img)));
}

TEST_CASE("training on shuffled labels yields chance-level held-out accuracy") {
    const int chars = 60, scenes = 3, held_chars = 15;
    std::vector<ProbeSample> all = render_probe_dataset(chars, scenes, kH, kW, 5202);
    size_t split = static_cast<size_t>(chars - held_chars) * scenes;
    std::vector<ProbeSample> train(all.begin(), all.begin() + split);
    std::vector<ProbeSample> held(all.begin() + split, all.end());

    // Shuffle which label map goes with which training image; held-out labels
    // stay truthful.
    Rng rng(99);
    std::vector<size_t> perm(train.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<std::map<std::string, int>> shuffled(train.size());
    for (size_t i = 0; i < train.size(); ++i) shuffled[i] = train[perm[i]].labels;
    for (size_t i = 0; i < train.size(); ++i) {
        // Keep the factual crop so visibility masking still matches the image.
        int crop = train[i].labels.at("crop");
        train[i].labels = shuffled[i];
        train[i].labels["crop"] = crop;
    }

    ProbeConfig cfg;
    cfg.epochs = 6;
    cfg.min_epochs = 6;
    try {
        train_probe(train, held, cfg);
        FAIL("gates must not pass on permuted labels");
    } catch (const ProbeGateError& e) {
        // Within 2x of chance for the heads with enough classes for the bound
        // to mean anything.
        for (const ProbeHead& h : probe_heads()) {
            if (h.classes < 4) continue;
            INFO("head ", h.name, " acc ", e.eval.head_accuracy.at(h.name));
            CHECK(e.eval.head_accuracy.at(h.name) <= 2.0 / h.classes);
        }
    }
}

TEST_CASE("probe checkpoint round trips") {
    const ProbeFixture& f = fixture();
    TempDir tmp("probe_ckpt");
    std::string path = tmp.sub("probe.ckpt");
    f.probe.save(path);

    AttributeProbe back = AttributeProbe::load(path);
    CHECK(back.gated());
    CHECK(back.gate_eval() == f.probe.gate_eval());
    CHECK(back.config().base == f.probe.config().base);
    CHECK(back.params().content_hash() == f.probe.params().content_hash());
    const Image& img = f.held.front().image;
    CHECK(back.classify(img) == f.probe.classify(img));
    CHECK(back.embedding(img) == f.probe.embedding(img));

    // A checkpoint of some other kind is refused.
    ParamStore other(1);
    other.create("x", {2, 2}, Init::he_normal, 2);
    std::string other_path = tmp.sub("other.ckpt");
    save_checkpoint(other_path, other, {{"kind", "something_else"}});
    CHECK_THROWS_AS(AttributeProbe::load(other_path), ValidationError);
}

TEST_CASE("segmentation recovers figure masks and head regions localize") {
    const ProbeFixture& f = fixture();
    double iou_sum = 0.0;
    int n = 0;
    for (size_t i = 0; i < 24; ++i) {
        const ProbeSample& s = f.held[i];
        Image bg = f.probe.predict_bg_mask(s.image);
        long inter = 0, uni = 0;
        for (size_t p = 0; p < bg.data.size(); ++p) {
            bool pf = bg.data[p] < 0.5f; // predicted figure
            bool gf = s.fg_mask.data[p] >= 0.5f;
            inter += pf && gf;
            uni += pf || gf;
        }
        iou_sum += uni > 0 ? static_cast<double>(inter) / uni : 1.0;
        ++n;
    }
    CHECK(iou_sum / n >= 0.90);

    // Head region: the predicted box overlaps the true head mask.
    Rng rng(314);
    CharacterSpec ch = random_character(rng);
    RenderedSample r = render(ch, eval_scene(2, 3, 1, 1, false), Domain::styleA, kH, kW);
    std::optional<CropBox> box = f.probe.head_region(r.image);
    REQUIRE(box.has_value());
    long head_in = 0, head_total = 0;
    for (int y = 0; y < kH; ++y)
        for (int x = 0; x < kW; ++x) {
            bool gt = r.part_at(y, x) == Part::head || r.part_at(y, x) == Part::hair ||
                      r.part_at(y, x) == Part::face;
            if (!gt) continue;
            ++head_total;
            if (x >= box->x0 && x < box->x0 + box->w && y >= box->y0 &&
                y < box->y0 + box->h)
                ++head_in;
        }
    CHECK(head_total > 0);
    CHECK(static_cast<double>(head_in) / head_total >= 0.80);

    // A blank image has no head to find.
    Image blank(kH, kW, 3, 1.0f);
    CHECK_FALSE(f.probe.head_region(blank).has_value());
}

TEST_CASE("appearance consistency separates same and different characters") {
    const ProbeFixture& f = fixture();
    Rng rng(271);
    double same_sum = 0.0, diff_sum = 0.0;
    int n = 12;
    bool saw_perfect = false;
    for (int i = 0; i < n; ++i) {
        CharacterSpec ch = random_character(rng);
        SceneSpec sc = eval_scene(static_cast<int>(rng.uniform_int(kPoses)),
                                  static_cast<int>(rng.uniform_int(kBackgrounds)),
                                  static_cast<int>(rng.uniform_int(kExpressions)),
                                  static_cast<int>(rng.uniform_int(2)),
                                  rng.uniform_int(2) == 1);
        RenderedSample r = render(ch, sc, Domain::styleA, kH, kW);
        double same = appearance_consistency(f.probe, r.image, ch);
        double diff = appearance_consistency(f.probe, r.image, all_different(ch));
        same_sum += same;
        diff_sum += diff;
        saw_perfect = saw_perfect || same == 1.0;
    }
    CHECK(same_sum / n >= 0.95);
    CHECK(diff_sum / n <= 0.05);
    CHECK(saw_perfect);
}

TEST_CASE("controllability hits the endpoints on clean renders") {
    const ProbeFixture& f = fixture();
    Rng rng(272);
    double hit_sum = 0.0, miss_sum = 0.0;
    int n = 12;
    for (int i = 0; i < n; ++i) {
        CharacterSpec ch = random_character(rng);
        int pose = static_cast<int>(rng.uniform_int(kPoses));
        int bg = static_cast<int>(rng.uniform_int(kBackgrounds));
        int expr = static_cast<int>(rng.uniform_int(kExpressions));
        int scale_id = static_cast<int>(rng.uniform_int(2));
        bool flip = rng.uniform_int(2) == 1;
        SceneSpec sc = eval_scene(pose, bg, expr, scale_id, flip);
        RenderedSample r = render(ch, sc, Domain::styleB, kH, kW);

        PromptCondition prompt = prompt_from_scene(sc);
        hit_sum += controllability(f.probe, r.image, prompt);

        PromptCondition wrong;
        wrong.action_id = (pose + 1) % kPoses;
        wrong.background_id = (bg + 1) % kBackgrounds;
        wrong.expression_id = (expr + 1) % kExpressions;
        wrong.viewpoint_id =
            viewpoint_id_of(1 - scale_id, !flip, CropMode::upper);
        miss_sum += controllability(f.probe, r.image, wrong);
    }
    CHECK(hit_sum / n >= 0.95);
    CHECK(miss_sum / n <= 0.05);
}

TEST_CASE("ap consistency is higher within a character than across characters") {
    const ProbeFixture& f = fixture();
    Rng rng(273);
    double within_sum = 0.0, across_sum = 0.0;
    const int trials = 6, set_size = 4;
    for (int t = 0; t < trials; ++t) {
        CharacterSpec ch = random_character(rng);
        std::vector<Image> same_set, mixed_set;
        for (int i = 0; i < set_size; ++i) {
            SceneSpec sc = eval_scene(static_cast<int>(rng.uniform_int(kPoses)),
                                      static_cast<int>(rng.uniform_int(kBackgrounds)),
                                      static_cast<int>(rng.uniform_int(kExpressions)),
                                      static_cast<int>(rng.uniform_int(2)),
                                      rng.uniform_int(2) == 1);
            same_set.push_back(render(ch, sc, Domain::styleB, kH, kW).image);
            CharacterSpec other = random_character(rng);
            mixed_set.push_back(render(other, sc, Domain::styleB, kH, kW).image);
        }
        within_sum += ap_consistency(f.probe, same_set);
        across_sum += ap_consistency(f.probe, mixed_set);
    }
    CHECK(within_sum / trials > across_sum / trials);

    // Duplicate sets sit exactly at 1; singleton sets are rejected.
    Image one = render(random_character(rng), std_scene(), Domain::styleA, kH, kW).image;
    CHECK(ap_consistency(f.probe, {one, one, one}) == 1.0);
    CHECK_THROWS_AS(ap_consistency(f.probe, {one}), ValidationError);
}

TEST_CASE("face region similarity separates characters across scenes") {
    const ProbeFixture& f = fixture();
    Rng rng(274);

    Image some = f.held.front().image;
    std::optional<real> self_sim = face_region_sim(f.probe, some, some);
    REQUIRE(self_sim.has_value());
    CHECK(*self_sim == 1.0);

    // Same character in two scenes vs a different character in the second
    // scene, averaged over many triples.
    int n = 0;
    double same_sum = 0.0, diff_sum = 0.0;
    for (int t = 0; t < 100; ++t) {
        CharacterSpec a = random_character(rng);
        CharacterSpec b = random_character(rng);
        if (character_labels(a) == character_labels(b)) continue;
        SceneSpec s1 = eval_scene(static_cast<int>(rng.uniform_int(kPoses)),
                                  static_cast<int>(rng.uniform_int(kBackgrounds)),
                                  static_cast<int>(rng.uniform_int(kExpressions)),
                                  static_cast<int>(rng.uniform_int(2)),
                                  rng.uniform_int(2) == 1);
        SceneSpec s2 = eval_scene(static_cast<int>(rng.uniform_int(kPoses)),
                                  static_cast<int>(rng.uniform_int(kBackgrounds)),
                                  static_cast<int>(rng.uniform_int(kExpressions)),
                                  static_cast<int>(rng.uniform_int(2)),
                                  rng.uniform_int(2) == 1);
        Image ia = render(a, s1, Domain::styleA, kH, kW).image;
        Image ia2 = render(a, s2, Domain::styleA, kH, kW).image;
        Image ib2 = render(b, s2, Domain::styleA, kH, kW).image;
        std::optional<real> same = face_region_sim(f.probe, ia, ia2);
        std::optional<real> diff = face_region_sim(f.probe, ia, ib2);
        if (!same || !diff) continue;
        same_sum += *same;
        diff_sum += *diff;
        ++n;
    }
    REQUIRE(n >= 80); // head detection succeeds on nearly all clean renders
    CHECK(same_sum / n > diff_sum / n);

    // No head, no value.
    Image blank(kH, kW, 3, 1.0f);
    CHECK_FALSE(face_region_sim(f.probe, blank, some).has_value());
}

TEST_CASE("reference and standardized target agree on appearance attributes") {
    const ProbeFixture& f = fixture();
    Rng rng(275);
    int judged = 0, agreed = 0;
    for (int t = 0; t < 10; ++t) {
        CharacterSpec ch = random_character(rng);
        PairSample pair = sample_pair(ch, 4000 + t, Domain::styleA, kH, kW);
        auto ref_pred = f.probe.classify(pair.reference.image);
        auto tgt_pred = f.probe.classify(pair.target.image);
        CropMode ref_crop = pair.reference.scene.crop_mode;
        for (const std::string& name : appearance_head_names()) {
            if (!head_visible_in(name, ref_crop)) continue;
            ++judged;
            agreed += ref_pred.at(name) == tgt_pred.at(name);
        }
    }
    CHECK(judged > 0);
    CHECK(static_cast<double>(agreed) / judged >= 0.95);
}
