#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vipastain/detect.hpp"
#include "vipastain/error.hpp"
#include "vipastain/synthdata.hpp"

using namespace vipastain;
using namespace vipastain::detect;

namespace {

Detection det(double x, double y, double w, double h, double score, std::string id = "p") {
    Detection d;
    d.box = {x, y, w, h};
    d.score = score;
    d.image_id = std::move(id);
    return d;
}

double pixel_iou(const Box& a, const Box& b) {
    int inter = 0, ua = 0, ub = 0;
    for (int y = -5; y < 40; ++y)
        for (int x = -5; x < 40; ++x) {
            const bool ia = x >= a.x && x < a.x + a.w && y >= a.y && y < a.y + a.h;
            const bool ib = x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h;
            inter += ia && ib;
            ua += ia;
            ub += ib;
        }
    return static_cast<double>(inter) / (ua + ub - inter);
}

std::vector<DetectorSample> smoke_samples(int n, std::uint64_t base) {
    std::vector<DetectorSample> out;
    synth::SceneSpec spec;
    spec.decoy_cluster_count = 1;
    for (int i = 0; i < n; ++i) {
        const auto s = synth::corpus_scene_spec(spec, Stain::he, static_cast<int>(base) + i, 0.75);
        const auto sc = synth::generate_pseudo_he(s);
        out.push_back({"p" + std::to_string(i), sc.patch.image, sc.truth.tls_boxes});
    }
    return out;
}

const DetectorModel& smoke_model() {
    static const DetectorModel m = [] {
        DetectorConfig c;
        c.epochs = 30;
        return train_detector(c, smoke_samples(80, 0), Mode::he);
    }();
    return m;
}

}  // namespace

TEST_CASE("iou examples and pixel oracle") {
    const Box a{0, 0, 10, 10}, b{5, 5, 10, 10};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, Box{20, 20, 5, 5}) == 0.0);
    CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0));
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> p(0, 20), s(1, 15);
    for (int i = 0; i < 300; ++i) {
        const Box x{double(p(rng)), double(p(rng)), double(s(rng)), double(s(rng))};
        const Box y{double(p(rng)), double(p(rng)), double(s(rng)), double(s(rng))};
        CHECK(iou(x, y) == doctest::Approx(pixel_iou(x, y)).epsilon(1e-12));
        CHECK(iou(x, y) == iou(y, x));
    }
}

TEST_CASE("nms examples") {
    CHECK(nms({det(0, 0, 10, 10, 0.9)}, 0.5).size() == 1);
    // B overlaps A at IoU 0.6
    const auto A = det(0, 0, 10, 10, 0.9), B = det(0, 0, 10, 6, 0.8), C = det(50, 50, 5, 5, 0.7);
    REQUIRE(iou(A.box, B.box) == doctest::Approx(0.6));
    const auto kept = nms({B, C, A}, 0.5);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].box == A.box);
    CHECK(kept[1].box == C.box);
    const std::vector<Detection> disjoint{det(0, 0, 2, 2, 0.1), det(5, 5, 2, 2, 0.9), det(9, 0, 2, 2, 0.5)};
    CHECK(nms(disjoint, 0.5).size() == 3);
}

TEST_CASE("nms equals the brute-force oracle") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = std::uniform_int_distribution<int>(0, 6)(rng);
        const auto dets = oracle::random_detections(rng, n);
        const double thr = std::uniform_int_distribution<int>(1, 7)(rng) / 10.0;
        const auto want = oracle::nms_subset(dets, thr);
        REQUIRE((want.empty() || want[0] >= 0));
        const auto got = nms(dets, thr);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].box == dets[static_cast<std::size_t>(want[i])].box);
            CHECK(got[i].score == dets[static_cast<std::size_t>(want[i])].score);
        }
    }
}

TEST_CASE("merge_detections") {
    const std::vector<Detection> he{det(0, 0, 10, 10, 0.9), det(1, 1, 10, 10, 0.6), det(30, 30, 8, 8, 0.5)};
    const auto only = merge_detections(he, {}, 0.5);
    const auto direct = nms(he, 0.5);
    REQUIRE(only.size() == direct.size());
    for (std::size_t i = 0; i < only.size(); ++i) CHECK(only[i].box == direct[i].box);

    auto dup = det(30, 30, 8, 8, 0.8);
    dup.source = Source::cd20;
    const auto merged = merge_detections({det(30, 30, 8, 8, 0.5)}, {dup}, 0.5);
    REQUIRE(merged.size() == 1);
    CHECK(merged[0].score == 0.8);
    CHECK(merged[0].source == Source::cd20);

    // five boxes spread over two patches
    const std::vector<Detection> a{det(0, 0, 10, 10, 0.7), det(2, 0, 10, 10, 0.9, "q"), det(40, 40, 6, 6, 0.3)};
    const std::vector<Detection> b{det(1, 1, 10, 10, 0.8), det(3, 1, 10, 10, 0.4, "q")};
    const auto m = merge_detections(a, b, 0.5);
    std::vector<Detection> p, q;
    for (const auto* l : {&a, &b})
        for (const auto& d : *l) (d.image_id == "p" ? p : q).push_back(d);
    std::size_t expected = 0;
    for (const auto* g : {&p, &q}) expected += oracle::nms_subset(*g, 0.5).size();
    CHECK(m.size() == expected);
    CHECK(m.size() == 3);

    auto wsi = det(0, 0, 5, 5, 0.5);
    wsi.frame = Frame::wsi;
    CHECK_THROWS_AS(merge_detections({det(0, 0, 5, 5, 0.5)}, {wsi}, 0.5), Error);
}

TEST_CASE("fuse_channels") {
    Image a(64, 64, 3, 11), b(64, 64, 3, 22);
    a.at(3, 4, 1) = 200;
    const Image f = fuse_channels(a, b);
    CHECK(f.channels == 6);
    CHECK(f.width == 64);
    CHECK(f.at(3, 4, 1) == 200);
    CHECK(f.at(3, 4, 4) == 22);
    const Image g = fuse_channels(a, a);
    for (std::size_t i = 0; i < a.pixel_count(); ++i)
        for (int c = 0; c < 3; ++c) CHECK(g.data[i * 6 + c] == g.data[i * 6 + 3 + c]);
    CHECK_THROWS_AS(fuse_channels(a, Image(32, 64, 3)), Error);
}

TEST_CASE("model input channels follow the mode") {
    DetectorConfig c;
    CHECK(DetectorModel(c, Mode::he).input_channels == 3);
    CHECK(DetectorModel(c, Mode::cd20).input_channels == 3);
    CHECK(DetectorModel(c, Mode::fused).input_channels == 6);
    CHECK_THROWS_AS(detect_patch(DetectorModel(c, Mode::fused), Image(64, 64, 3)), Error);
}

TEST_CASE("targets place each box at its centre cell") {
    DetectorConfig c;
    const DetectorModel m(c, Mode::he);
    DetectorSample s{"p", Image(64, 64, 3), {Box{10, 12, 20, 22}, Box{5, 5, 50, 40}}};
    const auto t = build_targets(m, {&s}, 64, 64);
    // 22 px is nearer the 24 px prior: stride 8, centre (20, 23) -> cell (2, 2)
    CHECK(t.obj8.at(0, 0, 2, 2) == 1.0);
    CHECK(t.box8.at(0, 1, 2, 2) == doctest::Approx(20.0 / 8 - 2));
    CHECK(t.box8.at(0, 3, 2, 2) == doctest::Approx(std::log(20.0 / 24)));
    CHECK(t.weight8.at(0, 0, 2, 2) == c.positive_weight);
    // 50 px goes to stride 16, centre (30, 25) -> cell (1, 1)
    CHECK(t.obj16.at(0, 0, 1, 1) == 1.0);
    CHECK(t.box16.at(0, 4, 1, 1) == doctest::Approx(std::log(40.0 / 48)));
    double total = 0;
    for (double v : t.obj8.data) total += v;
    for (double v : t.obj16.data) total += v;
    CHECK(total == 2.0);
}

TEST_CASE("detector training is deterministic") {
    DetectorConfig c;
    c.epochs = 2;
    const auto samples = smoke_samples(8, 500);
    auto a = train_detector(c, samples, Mode::he), b = train_detector(c, samples, Mode::he);
    const auto pa = a.params(), pb = b.params();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value().data == pb[i]->value().data);
}

TEST_CASE("trained smoke model finds TLS and ignores blank tissue") {
    const auto& m = smoke_model();
    synth::SceneSpec blank;
    blank.nucleus_count = blank.rbc_blob_count = blank.tls_cluster_count = 0;
    CHECK(detect_patch(m, synth::generate_pseudo_he(blank).patch.image).empty());

    int hits = 0, total = 0;
    for (const auto& s : smoke_samples(20, 1000)) {
        if (s.boxes.empty()) continue;
        ++total;
        for (const auto& d : detect_patch(m, s.input, s.id)) {
            CHECK(d.score >= m.config.score_threshold);
            CHECK(d.score <= 1.0);
            CHECK(d.box.w > 0);
            CHECK(d.frame == Frame::patch);
            if (iou(d.box, s.boxes[0]) >= 0.5) {
                ++hits;
                break;
            }
        }
    }
    CHECK(hits * 2 > total);
}

TEST_CASE("wsi detections are translated by the patch origin") {
    const auto& m = smoke_model();
    const auto samples = smoke_samples(10, 2000);
    for (const auto& s : samples) {
        const auto local = detect_patch(m, s.input);
        if (local.empty()) continue;
        patchio::GridPatchRef ref{"slideA", 1, 0, 512, 0, 64, ""};
        const auto wsi = detect_wsi(m, {{ref, s.input}});
        REQUIRE(wsi.size() == local.size());
        for (std::size_t i = 0; i < wsi.size(); ++i) {
            CHECK(wsi[i].box.x == local[i].box.x + 512);
            CHECK(wsi[i].box.y == local[i].box.y);
            CHECK(wsi[i].image_id == "slideA");
            CHECK(wsi[i].frame == Frame::wsi);
        }
        return;
    }
    FAIL("no sample produced a detection");
}

TEST_CASE("a TLS seen by two overlapping tiles survives once") {
    const auto& m = smoke_model();
    for (const auto& s : smoke_samples(40, 3000)) {
        const auto local = detect_patch(m, s.input);
        if (local.size() != 1 || local[0].box.x < 16) continue;
        // second tile starts 16 px to the right and sees the same structure
        Image shifted(64, 64, 3);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                for (int c = 0; c < 3; ++c) shifted.at(x, y, c) = s.input.at(std::min(63, x + 16), y, c);
        const auto other = detect_patch(m, shifted);
        if (other.size() != 1 || iou(Box{other[0].box.x + 16, other[0].box.y, other[0].box.w, other[0].box.h},
                                     local[0].box) <= m.config.nms_iou)
            continue;
        patchio::GridPatchRef r0{"s", 0, 0, 0, 0, 64, ""}, r1{"s", 1, 0, 16, 0, 64, ""};
        CHECK(detect_wsi(m, {{r0, s.input}, {r1, shifted}}).size() == 1);
        return;
    }
    FAIL("no suitable overlapping construction found");
}

TEST_CASE("detector save/load and detection json round trip") {
    TempDir d("detector");
    const auto& m = smoke_model();
    save_detector(m, d.path / "m.ckpt");
    const auto back = load_detector(d.path / "m.ckpt");
    CHECK(back.mode == Mode::he);
    const auto s = smoke_samples(3, 4000);
    for (const auto& x : s) {
        const auto a = detect_patch(m, x.input, x.id), b = detect_patch(back, x.input, x.id);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].box == b[i].box);
    }
    std::vector<Detection> dets{det(1.25, 2, 3, 4, 0.75, "x"), det(5, 6, 7, 8, 0.5, "y")};
    dets[1].source = Source::fused;
    dets[1].frame = Frame::wsi;
    write_detections(d.path / "d.jsonl", dets);
    const auto r = read_detections(d.path / "d.jsonl");
    REQUIRE(r.size() == 2);
    CHECK(r[0].box == dets[0].box);
    CHECK(r[0].score == 0.75);
    CHECK(r[1].source == Source::fused);
    CHECK(r[1].frame == Frame::wsi);
    CHECK(r[1].image_id == "y");
}

TEST_CASE("fused samples need every pair") {
    TempDir d("fused");
    DatasetManifest m;
    m.root = d.path;
    for (const char* id : {"s0_x0_y0", "s0_x64_y0"}) {
        ManifestRow r;
        r.patch_id = id;
        r.stain = Stain::he;
        r.image_path = std::string(id) + ".png";
        m.rows.push_back(r);
    }
    ManifestRow v = m.rows[0];
    v.stain = Stain::virtual_cd20;
    m.rows.push_back(v);
    try {
        samples_from_manifest(m, {}, Mode::fused, "");
        FAIL("expected an unpaired error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("s0_x64_y0") != std::string::npos);
    }
}

TEST_CASE("detector config round trip") {
    DetectorConfig c;
    c.epochs = 12;
    c.flip_augment = false;
    c.score_threshold = 0.25;
    CHECK(DetectorConfig::from_text(c.to_text()).to_text() == c.to_text());
    c.nms_iou = 1.5;
    CHECK_THROWS(c.validate());
}
