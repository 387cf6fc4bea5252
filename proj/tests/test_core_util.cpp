#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "charpipe/checkpoint.hpp"
#include "charpipe/hashing.hpp"
#include "charpipe/image.hpp"
#include "charpipe/rng.hpp"
#include "test_util.hpp"

using namespace charpipe;
using charpipe::testutil::TempDir;

TEST_CASE("rng streams are pure functions of seed, purpose, counter") {
    Rng a = Rng(123).fork("train:noise", 7);
    Rng b = Rng(123).fork("train:noise", 7);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c = Rng(123).fork("train:noise", 8);
    Rng d = Rng(123).fork("train:timestep", 7);
    Rng e = Rng(124).fork("train:noise", 7);
    Rng base = Rng(123).fork("train:noise", 7);
    uint64_t v = base.next_u64();
    CHECK(v != c.next_u64());
    CHECK(v != d.next_u64());
    CHECK(v != e.next_u64());
}

TEST_CASE("rng uniform and normal look sane") {
    Rng r(99);
    const int n = 20000;
    double mean = 0.0, var = 0.0;
    for (int i = 0; i < n; ++i) {
        double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        mean += u;
    }
    mean /= n;
    CHECK(std::abs(mean - 0.5) < 0.01);

    Rng g(100);
    mean = 0.0;
    std::vector<double> xs(n);
    for (int i = 0; i < n; ++i) {
        xs[i] = g.normal();
        mean += xs[i];
    }
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n - 1;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);

    CHECK_THROWS_AS(g.uniform_int(0), ValidationError);
    for (int i = 0; i < 50; ++i) {
        int64_t k = g.uniform_int(12);
        CHECK(k >= 0);
        CHECK(k < 12);
    }
}

TEST_CASE("sha256 matches known vectors") {
    CHECK(sha256_hex(std::string()) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex(std::string("abc")) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

    Sha256Stream s;
    s.update("a");
    s.update("bc");
    CHECK(s.hex() == sha256_hex(std::string("abc")));

    TempDir td("sha");
    std::ofstream(td.sub("f.txt")) << "abc";
    CHECK(sha256_file(td.sub("f.txt")) == sha256_hex(std::string("abc")));
    CHECK_THROWS_AS(sha256_file(td.sub("missing.txt")), DependencyError);
}

TEST_CASE("png round trip preserves quantized pixels and bytes") {
    TempDir td("png");
    Rng r(5);
    Image img(20, 14, 3);
    for (float& v : img.data) v = static_cast<float>(r.uniform());

    std::string p1 = td.sub("a.png");
    write_png(p1, img);
    Image back = read_png(p1);
    REQUIRE(back.same_shape(img));
    // Quantization is the only loss; a second trip is exact.
    std::string p2 = td.sub("b.png");
    write_png(p2, back);
    Image back2 = read_png(p2);
    CHECK(images_identical(back, back2));
    CHECK(sha256_file(p1) == sha256_file(p2));

    // Gray images round trip too.
    Image mask(8, 6, 1);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 6; ++x) mask.at(y, x, 0) = (x + y) % 2 ? 1.0f : 0.0f;
    std::string pm = td.sub("m.png");
    write_png(pm, mask);
    CHECK(images_identical(read_png(pm), mask));

    CHECK_THROWS_AS(read_png(td.sub("missing.png")), DependencyError);
    std::ofstream(td.sub("junk.png")) << "not a png at all";
    CHECK_THROWS_AS(read_png(td.sub("junk.png")), ValidationError);
}

TEST_CASE("resize_nearest picks exact source pixels") {
    Image img(2, 2, 1);
    img.at(0, 0, 0) = 0.1f;
    img.at(0, 1, 0) = 0.2f;
    img.at(1, 0, 0) = 0.3f;
    img.at(1, 1, 0) = 0.4f;
    Image up = resize_nearest(img, 4, 4);
    CHECK(up.at(0, 0, 0) == 0.1f);
    CHECK(up.at(0, 3, 0) == 0.2f);
    CHECK(up.at(3, 0, 0) == 0.3f);
    CHECK(up.at(3, 3, 0) == 0.4f);
}

TEST_CASE("checkpoint round trip is bit exact") {
    TempDir td("ckpt");
    ParamStore ps(11);
    ps.create("net.a.w", {3, 4}, Init::he_normal, 4);
    ps.create("net.b.w", {2, 2, 3, 3}, Init::he_normal, 18);
    ps.create("net.bias", {7}, Init::normal_small);

    json extra = {{"kind", "unit-test"}, {"config", {{"width", 32}, {"height", 48}}}};
    std::string path = td.sub("model.ckpt");
    save_checkpoint(path, ps, extra);

    LoadedCheckpoint lc = load_checkpoint(path);
    CHECK(lc.header["kind"] == "unit-test");
    CHECK(lc.header["config"]["width"] == 32);
    CHECK(lc.header["format_version"] == kCheckpointVersion);
    REQUIRE(lc.params.all().size() == 3);
    for (const auto& [name, t] : ps.all()) {
        REQUIRE(lc.params.has(name));
        CHECK(lc.params.get(name).shape() == t.shape());
        CHECK(lc.params.get(name).val() == t.val()); // bitwise for doubles
    }
    CHECK(ps.content_hash() == lc.params.content_hash());
}

TEST_CASE("checkpoint loader rejects malformed files") {
    TempDir td("ckptbad");
    CHECK_THROWS_AS(load_checkpoint(td.sub("missing.ckpt")), DependencyError);

    std::ofstream(td.sub("junk.ckpt")) << "XXXX definitely not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint(td.sub("junk.ckpt")), ValidationError);

    // Wrong version byte.
    ParamStore ps(1);
    ps.create("w", {2}, Init::zeros);
    std::string path = td.sub("v.ckpt");
    save_checkpoint(path, ps, json::object());
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(4);
        int32_t bad = 999;
        f.write(reinterpret_cast<const char*>(&bad), sizeof(bad));
    }
    CHECK_THROWS_AS(load_checkpoint(path), ValidationError);

    // Truncated data section.
    save_checkpoint(path, ps, json::object());
    auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 8);
    CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
}
