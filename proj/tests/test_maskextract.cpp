#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "vipastain/error.hpp"
#include "vipastain/maskextract.hpp"
#include "vipastain/synthdata.hpp"

using namespace vipastain;
using namespace vipastain::masks;

namespace {

ThresholdSet single(int t, Polarity p = Polarity::keep_below) {
    ThresholdSet ts;
    ts.thresholds = {t};
    ts.working_index = 0;
    ts.polarity = p;
    return ts;
}

std::vector<Image> corpus(Stain s, int n, std::uint64_t base) {
    std::vector<Image> out;
    synth::SceneSpec spec;
    for (int i = 0; i < n; ++i) {
        spec.seed = base + static_cast<std::uint64_t>(i);
        spec.tls_cluster_count = i % 4 == 0 ? 0 : 1;
        out.push_back(s == Stain::he ? synth::generate_pseudo_he(spec).patch.image
                                     : synth::generate_pseudo_cd20(spec).patch.image);
    }
    return out;
}

}  // namespace

TEST_CASE("split_channels") {
    Image px(2, 1, 3);
    px.data = {255, 0, 0, 9, 9, 9};
    const auto ch = split_channels(px);
    CHECK(ch[0].data == std::vector<std::uint8_t>{255, 9});
    CHECK(ch[1].data == std::vector<std::uint8_t>{0, 9});
    CHECK(ch[2].data == std::vector<std::uint8_t>{0, 9});
    CHECK(merge_channels(ch) == px);
    CHECK_THROWS_AS(split_channels(Image(2, 2, 1)), Error);
}

TEST_CASE("histogram bins sum to the pixel count") {
    Image c(5, 3, 1, 4);
    c.data[2] = 250;
    const auto h = histogram_of(c);
    std::uint64_t sum = 0;
    for (auto b : h.bins) sum += b;
    CHECK(sum == 15);
    CHECK(h.total == 15);
    CHECK(h.bins[4] == 14);
}

TEST_CASE("k = 7 gives eight classes") {
    std::vector<std::uint64_t> h(256, 0);
    for (int i = 0; i < 256; i += 16) h[static_cast<std::size_t>(i)] = 10 + static_cast<std::uint64_t>(i);
    const auto t = multi_otsu(h, 7);
    CHECK(t.size() == 7);
    for (std::size_t i = 1; i < t.size(); ++i) CHECK(t[i] > t[i - 1]);
}

TEST_CASE("equal spikes at 0, 3, 7 with k = 2") {
    std::vector<std::uint64_t> h(8, 0);
    h[0] = h[3] = h[7] = 100;
    CHECK(multi_otsu(h, 2) == std::vector<int>{0, 3});
    CHECK(oracle::exhaustive_otsu(h, 2) == std::vector<int>{0, 3});
}

TEST_CASE("two-value histogram, k = 1, takes the smallest optimum") {
    std::vector<std::uint64_t> h(256, 0);
    h[0] = h[255] = 50;
    CHECK(multi_otsu(h, 1) == std::vector<int>{0});
}

TEST_CASE("degenerate histograms are rejected") {
    std::vector<std::uint64_t> h(256, 0);
    h[10] = 5;
    h[20] = 5;
    CHECK_THROWS_AS(multi_otsu(h, 2), DegenerateHistogramError);
    CHECK_NOTHROW(multi_otsu(h, 1));
}

TEST_CASE("multi_otsu equals exhaustive search on small histograms") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 120; ++trial) {
        const int k = 1 + trial % 3;
        const int L = std::uniform_int_distribution<int>(k + 1, 40)(rng);
        const auto h = oracle::random_histogram(rng, L, k);
        int populated = 0;
        for (auto c : h) populated += c > 0;
        if (populated < k + 1) continue;
        CAPTURE(trial);
        CHECK(multi_otsu(h, k) == oracle::exhaustive_otsu(h, k));
    }
}

TEST_CASE("between-class variance agrees with the direct definition") {
    std::vector<std::uint64_t> h(8, 0);
    h[1] = 2;
    h[6] = 2;
    // two classes {1}, {6} with mean 3.5: variance 6.25
    const std::vector<int> t{3};
    CHECK(between_class_variance(h, t) == doctest::Approx(6.25));
}

TEST_CASE("extract_region polarity") {
    Image all0(3, 3, 1, 0), all255(3, 3, 1, 255);
    CHECK(extract_region(all0, single(0)).count() == 9);
    CHECK(extract_region(all255, single(200)).count() == 0);
    Image c(2, 2, 1);
    c.data = {10, 200, 90, 250};
    CHECK(extract_region(c, single(100)).data == std::vector<std::uint8_t>{1, 0, 1, 0});
    CHECK(extract_region(c, single(100, Polarity::keep_above)).data == std::vector<std::uint8_t>{0, 1, 0, 1});
}

TEST_CASE("clean_mask drops specks and fills holes") {
    Mask speck(7, 7);
    speck.at(3, 3) = 1;
    CHECK_FALSE(clean_mask(speck, 4, true).any());

    Mask ring(9, 9);
    for (int y = 2; y <= 6; ++y)
        for (int x = 2; x <= 6; ++x)
            if (!((x == 2 || x == 6) && (y == 2 || y == 6))) ring.at(x, y) = 1;
    ring.at(4, 4) = 0;
    const Mask filled = clean_mask(ring, 1, true);
    CHECK(filled.at(4, 4) == 1);
    CHECK(filled.count() == 21);
    CHECK(clean_mask(ring, 1, false).at(4, 4) == 0);
}

TEST_CASE("H&E masks without RBCs have empty m_r") {
    synth::SceneSpec s;
    s.rbc_blob_count = 0;
    s.seed = 5;
    const auto imgs = corpus(Stain::he, 20, 100);
    const auto th = calibrate_domain(Stain::he, imgs);
    const auto set = th.extract(synth::generate_pseudo_he(s).patch.image);
    REQUIRE(set.rbc);
    CHECK(*set.nucleus == *set.nucleus_plus_rbc);
    CHECK_FALSE(set.rbc->any());
}

TEST_CASE("blank background yields empty masks") {
    synth::SceneSpec s;
    s.nucleus_count = s.rbc_blob_count = s.tls_cluster_count = 0;
    s.noise_sigma = 0;
    const auto th_he = calibrate_domain(Stain::he, corpus(Stain::he, 20, 100));
    const auto he = th_he.extract(synth::generate_pseudo_he(s).patch.image);
    CHECK_FALSE(he.nucleus->any());
    CHECK_FALSE(he.rbc->any());
    CHECK_FALSE(he.nucleus_plus_rbc->any());
    const auto th_cd = calibrate_domain(Stain::cd20, corpus(Stain::cd20, 20, 100));
    const auto cd = th_cd.extract(synth::generate_pseudo_cd20(s).patch.image);
    CHECK_FALSE(cd.nucleus->any());
    CHECK_FALSE(cd.positive->any());
}

TEST_CASE("extracted masks match synthetic ground truth") {
    const auto he_imgs = corpus(Stain::he, 30, 500);
    const auto cd_imgs = corpus(Stain::cd20, 30, 500);
    const auto th_he = calibrate_domain(Stain::he, he_imgs);
    const auto th_cd = calibrate_domain(Stain::cd20, cd_imgs);
    synth::SceneSpec s;
    double iou_n = 0, iou_p = 0;
    const int n = 10;
    for (int i = 0; i < n; ++i) {
        s.seed = 9000 + static_cast<std::uint64_t>(i);
        const auto he = synth::generate_pseudo_he(s);
        const auto cd = synth::generate_pseudo_cd20(s);
        iou_n += mask_iou(*th_he.extract(he.patch.image).nucleus, he.truth.nucleus_mask);
        iou_p += mask_iou(*th_cd.extract(cd.patch.image).positive, cd.truth.positive_mask);
        const auto set = th_he.extract(he.patch.image);
        CHECK(*set.rbc == mask_xor(*set.nucleus_plus_rbc, *set.nucleus));
    }
    CHECK(iou_n / n >= 0.8);
    CHECK(iou_p / n >= 0.8);
}

TEST_CASE("CD20 extraction is deterministic and empty without TLS") {
    synth::SceneSpec s;
    s.tls_cluster_count = 0;
    s.seed = 77;
    const auto th = calibrate_domain(Stain::cd20, corpus(Stain::cd20, 20, 300));
    const Image img = synth::generate_pseudo_cd20(s).patch.image;
    const auto a = th.extract(img), b = th.extract(img);
    CHECK(*a.nucleus == *b.nucleus);
    CHECK(*a.positive == *b.positive);
    CHECK_FALSE(a.positive->any());
}

TEST_CASE("soft masks") {
    CHECK(soft_value(100, 100, 5, Polarity::keep_below) == doctest::Approx(0.5));
    CHECK(soft_value(90, 100, 5, Polarity::keep_below) > 0.5);
    CHECK(soft_value(90, 100, 5, Polarity::keep_above) < 0.5);

    Image c(4, 4, 1);
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] = static_cast<std::uint8_t>(i * 16);
    const ThresholdSet ts = single(100);
    const SoftMask sm = soft_mask(c, 100.5, 0.01);
    const Mask hard = extract_region(c, ts);
    for (std::size_t i = 0; i < c.data.size(); ++i) CHECK(std::abs(sm.data[i] - hard.data[i]) < 1e-4);
    CHECK_THROWS(soft_mask(c, 100, 0));
}

TEST_CASE("thresholds json round trip") {
    ThresholdSet a;
    a.domain = Stain::cd20;
    a.channel = Channel::g;
    a.thresholds = {10, 20, 30, 40, 50, 60, 70};
    a.polarity = Polarity::keep_above;
    ThresholdSet b = a;
    b.channel = Channel::b;
    const auto back = thresholds_from_json(thresholds_to_json({a, b}));
    REQUIRE(back.size() == 2);
    CHECK(back[0].thresholds == a.thresholds);
    CHECK(back[0].polarity == Polarity::keep_above);
    CHECK(back[1].channel == Channel::b);
    const auto d = domain_from_sets(Stain::cd20, back);
    CHECK(d.other.channel == Channel::g);
}

TEST_CASE("working threshold defaults to the second highest of seven") {
    const auto th = calibrate_domain(Stain::he, corpus(Stain::he, 10, 40));
    CHECK(th.blue.thresholds.size() == 7);
    CHECK(th.blue.working_index == 5);
    CHECK(th.blue.working_threshold() == th.blue.thresholds[5]);
}
