#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "vipastain/error.hpp"
#include "vipastain/patchio.hpp"

using namespace vipastain;

namespace {

Image random_image(std::mt19937_64& rng, int w, int h, int lo = 0, int hi = 255) {
    Image img(w, h, 3);
    std::uniform_int_distribution<int> v(lo, hi);
    for (auto& p : img.data) p = static_cast<std::uint8_t>(v(rng));
    return img;
}

ManifestRow row(const std::string& slide, int i) {
    ManifestRow r;
    r.patch_id = slide + "_x" + std::to_string(i * 64) + "_y0";
    r.image_path = "images/" + r.patch_id + ".png";
    return r;
}

}  // namespace

TEST_CASE("exact tiling of 1024x1024 into 512 px patches") {
    Image img(1024, 1024, 3, 7);
    const auto tiles = patchio::tile_image(img, 512, 0, "s");
    REQUIRE(tiles.size() == 4);
    std::set<std::pair<int, int>> grid;
    for (const auto& t : tiles) {
        grid.insert({t.ref.grid_x, t.ref.grid_y});
        CHECK(t.ref.origin_x == t.ref.grid_x * 512);
        CHECK(t.ref.origin_y == t.ref.grid_y * 512);
        CHECK(t.patch.image.width == 512);
    }
    CHECK(grid == std::set<std::pair<int, int>>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
    CHECK(patchio::patch_file_name(tiles[1].ref).find("s_x") == 0);
}

TEST_CASE("600x600 tiles into 4 reflected patches and stitches back") {
    std::mt19937_64 rng(1);
    const Image img = random_image(rng, 600, 600);
    const auto tiles = patchio::tile_image(img, 512, 0);
    CHECK(tiles.size() == 4);
    CHECK(patchio::stitch_patches(tiles, 600, 600) == img);
    // reflection padding: column 600 mirrors column 598
    const auto& right = tiles[1].ref.origin_x > 0 ? tiles[1] : tiles[2];
    const int local = 600 - right.ref.origin_x;
    CHECK(right.patch.image.at(local, 5, 0) == img.at(598, right.ref.origin_y + 5, 0));
}

TEST_CASE("image smaller than one patch is rejected") {
    CHECK_THROWS_AS(patchio::tile_image(Image(40, 40, 3), 64, 0), Error);
}

TEST_CASE("half-overlapping constant patches average") {
    patchio::TiledPatch a, b;
    a.ref = {"s", 0, 0, 0, 0, 64, ""};
    b.ref = {"s", 1, 0, 32, 0, 64, ""};
    a.patch.image = Image(64, 64, 3, 10);
    b.patch.image = Image(64, 64, 3, 30);
    const std::vector<patchio::TiledPatch> tiles{a, b};
    const Image out = patchio::stitch_patches(tiles, 96, 64);
    CHECK(out.at(10, 10) == 10);
    CHECK(out.at(40, 10) == 20);
    CHECK(out.at(90, 10) == 30);
}

TEST_CASE("single patch stitch is the identity") {
    std::mt19937_64 rng(2);
    patchio::TiledPatch t;
    t.ref = {"s", 0, 0, 0, 0, 64, ""};
    t.patch.image = random_image(rng, 64, 64);
    CHECK(patchio::stitch_patches(std::vector{t}, 64, 64) == t.patch.image);
}

TEST_CASE("coverage gaps are reported by grid cell") {
    auto tiles = patchio::tile_image(Image(128, 128, 3, 1), 64, 0);
    tiles.erase(tiles.begin() + 1);
    try {
        patchio::stitch_patches(tiles, 128, 128);
        FAIL("expected a coverage error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("missing") != std::string::npos);
    }
}

TEST_CASE("tile/stitch round trip is bit-exact on random images") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> dim(64, 300);
    for (int i = 0; i < 20; ++i) {
        const Image img = random_image(rng, dim(rng), dim(rng));
        const auto tiles = patchio::tile_image(img, 64, 0);
        CHECK(patchio::stitch_patches(tiles, img.width, img.height) == img);
    }
}

TEST_CASE("stain stats of a constant image") {
    const Image img(8, 8, 3, 100);
    const auto s = patchio::compute_stain_stats(std::span(&img, 1));
    const auto o = patchio::rgb_to_opponent(100, 100, 100);
    for (int c = 0; c < 3; ++c) {
        CHECK(s.mean[c] == doctest::Approx(o[c]));
        CHECK(s.stddev[c] == doctest::Approx(patchio::kStdEpsilon));
    }
    CHECK_THROWS(patchio::compute_stain_stats({}));
}

TEST_CASE("stain stats over two images equal pooled pixel stats") {
    std::mt19937_64 rng(4);
    const std::vector<Image> imgs{random_image(rng, 9, 7, 0, 200), random_image(rng, 5, 11, 0, 200)};
    std::array<std::vector<double>, 3> flat;
    for (const auto& im : imgs)
        for (std::size_t i = 0; i < im.pixel_count(); ++i) {
            const auto o = patchio::rgb_to_opponent(im.data[i * 3], im.data[i * 3 + 1], im.data[i * 3 + 2]);
            for (int c = 0; c < 3; ++c) flat[c].push_back(o[c]);
        }
    const auto s = patchio::compute_stain_stats(imgs);
    for (int c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (double x : flat[c]) m += x;
        m /= static_cast<double>(flat[c].size());
        for (double x : flat[c]) v += (x - m) * (x - m);
        v /= static_cast<double>(flat[c].size());
        CHECK(s.mean[c] == doctest::Approx(m).epsilon(1e-12));
        CHECK(s.stddev[c] == doctest::Approx(std::sqrt(v)).epsilon(1e-9));
    }
}

TEST_CASE("opponent transform round trips") {
    const auto o = patchio::rgb_to_opponent(12, 200, 77);
    const auto b = patchio::opponent_to_rgb(o[0], o[1], o[2]);
    CHECK(b[0] == doctest::Approx(12));
    CHECK(b[1] == doctest::Approx(200));
    CHECK(b[2] == doctest::Approx(77));
}

TEST_CASE("normalizing to own stats is a fixed point") {
    std::mt19937_64 rng(5);
    const Image img = random_image(rng, 32, 32, 20, 220);
    const auto s = patchio::compute_stain_stats(std::span(&img, 1));
    const Image out = patchio::normalize_stain(img, s);
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(int(out.data[i]) - int(img.data[i])) <= 1);
}

TEST_CASE("constant colour shift is removed by normalization") {
    std::mt19937_64 rng(6);
    const Image img = random_image(rng, 32, 32, 20, 200);
    Image shifted = img;
    for (std::size_t i = 0; i < shifted.data.size(); i += 3) {
        shifted.data[i] += 15;
        shifted.data[i + 2] += 30;
    }
    patchio::StainStats ref;
    ref.mean = {250, 10, -5};
    ref.stddev = {30, 8, 6};
    CHECK(patchio::normalize_stain(img, ref) == patchio::normalize_stain(shifted, ref));
}

TEST_CASE("stain stats json round trip") {
    patchio::StainStats s;
    s.mean = {1.5, -2, 3};
    s.stddev = {4, 5, 6.25};
    const auto b = patchio::stain_stats_from_json(patchio::stain_stats_to_json(s));
    CHECK(b.mean == s.mean);
    CHECK(b.stddev == s.stddev);
}

TEST_CASE("slide-stratified split") {
    DatasetManifest m;
    for (int s = 0; s < 10; ++s)
        for (int i = 0; i < 3; ++i) m.rows.push_back(row("slide" + std::to_string(s), i));
    const auto [tr, va] = patchio::split_dataset(m, 0.8, 9);
    CHECK(tr.rows.size() == 24);
    CHECK(va.rows.size() == 6);
    std::set<std::string> a, b;
    for (const auto& r : tr.rows) a.insert(r.slide_id());
    for (const auto& r : va.rows) b.insert(r.slide_id());
    for (const auto& s : a) CHECK(b.count(s) == 0);

    const auto [tr2, va2] = patchio::split_dataset(m, 0.8, 9);
    CHECK(tr2.rows.size() == tr.rows.size());
    for (std::size_t i = 0; i < tr.rows.size(); ++i) CHECK(tr.rows[i].patch_id == tr2.rows[i].patch_id);

    DatasetManifest two;
    two.rows = {row("a", 0), row("b", 0)};
    const auto [t1, v1] = patchio::split_dataset(two, 1 - 1e-9, 1);
    CHECK(t1.rows.size() == 1);
    CHECK(v1.rows.size() == 1);

    DatasetManifest one;
    one.rows = {row("a", 0), row("a", 1)};
    CHECK_THROWS_AS(patchio::split_dataset(one, 0.8, 1), Error);
}

TEST_CASE("area resampling averages blocks") {
    Image img(4, 2, 1);
    img.data = {0, 10, 20, 30, 40, 50, 60, 70};
    const Image out = patchio::resize_area(img, 2, 1);
    CHECK(out.data[0] == 25);
    CHECK(out.data[1] == 45);
}
