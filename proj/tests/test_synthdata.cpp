#include <doctest.h>

#include <filesystem>

#include "test_util.hpp"
#include "vipastain/error.hpp"
#include "vipastain/maskextract.hpp"
#include "vipastain/patchio.hpp"
#include "vipastain/synthdata.hpp"

using namespace vipastain;
namespace fs = std::filesystem;

TEST_CASE("empty scene renders a uniform background with empty masks") {
    synth::SceneSpec s;
    s.nucleus_count = 0;
    s.rbc_blob_count = 0;
    s.tls_cluster_count = 0;
    s.noise_sigma = 0;
    const auto he = synth::generate_pseudo_he(s);
    const auto& img = he.patch.image;
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(img.data[i] == img.data[i % 3]);
    CHECK_FALSE(he.truth.nucleus_mask.any());
    CHECK_FALSE(he.truth.rbc_mask.any());
    CHECK_FALSE(he.truth.positive_mask.any());
    CHECK(he.truth.tls_boxes.empty());
}

TEST_CASE("same spec and seed are byte-identical") {
    synth::SceneSpec s;
    s.seed = 99;
    const auto a = synth::generate_pseudo_he(s), b = synth::generate_pseudo_he(s);
    CHECK(a.patch.image == b.patch.image);
    CHECK(a.truth.nucleus_mask == b.truth.nucleus_mask);
    const auto c = synth::generate_pseudo_cd20(s), d = synth::generate_pseudo_cd20(s);
    CHECK(c.patch.image == d.patch.image);
    CHECK(c.truth.positive_mask == d.truth.positive_mask);
    s.seed = 100;
    CHECK_FALSE(synth::generate_pseudo_he(s).patch.image == a.patch.image);
}

TEST_CASE("one TLS cluster of 30 nuclei has one box holding them") {
    synth::SceneSpec s;
    s.canvas_size = 128;
    s.tls_cluster_count = 1;
    s.tls_cluster_density = 30;
    s.seed = 3;
    const auto sc = synth::generate_pseudo_he(s);
    REQUIRE(sc.truth.tls_boxes.size() == 1);
    const Box& b = sc.truth.tls_boxes[0];
    int inside = 0;
    for (auto [x, y] : sc.truth.nucleus_centroids)
        if (x >= b.x && x <= b.x + b.w && y >= b.y && y <= b.y + b.h) ++inside;
    CHECK(inside >= 30);
}

TEST_CASE("CD20 positive mask has one component per cluster") {
    synth::SceneSpec s;
    s.tls_cluster_count = 0;
    CHECK_FALSE(synth::generate_pseudo_cd20(s).truth.positive_mask.any());
    s.canvas_size = 128;
    s.tls_cluster_count = 2;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        s.seed = seed;
        const auto sc = synth::generate_pseudo_cd20(s);
        CHECK(masks::labelled_components(sc.truth.positive_mask, true) == 2);
    }
}

TEST_CASE("ground truth invariants") {
    synth::SceneSpec s;
    CHECK(s.palette.all_distinct());
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        s.seed = seed;
        const auto sc = synth::generate_pseudo_he(s);
        const auto& t = sc.truth;
        CHECK_FALSE(mask_and(t.nucleus_mask, t.rbc_mask).any());
        CHECK(t.nucleus_mask.width == s.canvas_size);
        REQUIRE(t.tls_boxes.size() == t.tls_masks.size());
        for (std::size_t i = 0; i < t.tls_boxes.size(); ++i) {
            const Mask& m = t.tls_masks[i];
            int x0 = m.width, y0 = m.height, x1 = -1, y1 = -1;
            for (int y = 0; y < m.height; ++y)
                for (int x = 0; x < m.width; ++x)
                    if (m.at(x, y)) {
                        x0 = std::min(x0, x);
                        y0 = std::min(y0, y);
                        x1 = std::max(x1, x);
                        y1 = std::max(y1, y);
                    }
            const Box& b = t.tls_boxes[i];
            CHECK(b.x == x0);
            CHECK(b.y == y0);
            CHECK(b.w == x1 - x0 + 1);
            CHECK(b.h == y1 - y0 + 1);
        }
    }
}

TEST_CASE("placement failure names the object") {
    synth::SceneSpec s;
    s.tls_cluster_count = 0;
    s.nucleus_count = 5000;
    try {
        synth::generate_pseudo_he(s);
        FAIL("expected a placement error");
    } catch (const PlacementError& e) {
        CHECK(std::string(e.what()).find("nucleus") != std::string::npos);
    }
    s.canvas_size = 32;
    CHECK_THROWS_AS(s.validate(), UsageError);
}

TEST_CASE("decoy aggregates carry no DAB and no box") {
    synth::SceneSpec s;
    s.tls_cluster_count = 0;
    s.decoy_cluster_count = 1;
    s.decoy_cluster_density = 16;
    s.seed = 11;
    const auto he = synth::generate_pseudo_he(s);
    CHECK(he.truth.tls_boxes.empty());
    CHECK(he.truth.nucleus_centroids.size() >= 16);
    CHECK_FALSE(synth::generate_pseudo_cd20(s).truth.positive_mask.any());
}

TEST_CASE("generate_corpus writes a deterministic manifest") {
    TempDir a("corpus_a"), b("corpus_b");
    synth::SceneSpec s;
    synth::CorpusOptions opt;
    opt.stains = {Stain::he};
    const auto ma = synth::generate_corpus(s, 10, a.path, opt);
    CHECK(ma.rows.size() == 10);
    for (const auto& r : ma.rows) {
        CHECK(fs::exists(ma.resolve(r.image_path)));
        for (const auto& m : r.mask_paths) CHECK(fs::exists(ma.resolve(m)));
    }
    synth::generate_corpus(s, 10, b.path, opt);
    CHECK(slurp(a.path / "manifest.csv") == slurp(b.path / "manifest.csv"));
    CHECK(slurp(a.path / "annotations.jsonl") == slurp(b.path / "annotations.jsonl"));
    for (const auto& r : ma.rows) CHECK(slurp(a.path / r.image_path) == slurp(b.path / r.image_path));

    const auto back = read_manifest(a.path / "manifest.csv");
    CHECK(back.rows.size() == 10);
}

TEST_CASE("100 patches over 10 slides split 8:2 into 80/20 rows") {
    TempDir d("corpus_split");
    synth::SceneSpec s;
    synth::CorpusOptions opt;
    opt.stains = {Stain::he};
    const auto m = synth::generate_corpus(s, 100, d.path, opt);
    const auto [train, val] = patchio::split_dataset(m, 0.8, 7);
    CHECK(train.rows.size() == 80);
    CHECK(val.rows.size() == 20);
}

TEST_CASE("corpus scene spec keeps decoys out of TLS patches") {
    synth::SceneSpec s;
    s.decoy_cluster_count = 1;
    int with_tls = 0;
    for (int i = 0; i < 200; ++i) {
        const auto sp = synth::corpus_scene_spec(s, Stain::he, i, 0.75);
        CHECK((sp.tls_cluster_count == 0 || sp.decoy_cluster_count == 0));
        with_tls += sp.tls_cluster_count > 0;
    }
    CHECK(with_tls > 120);
    CHECK(with_tls < 180);
}
