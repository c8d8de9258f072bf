#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include <json.hpp>

#include "test_util.hpp"
#include "vipastain/cli.hpp"
#include "vipastain/config.hpp"
#include "vipastain/detect.hpp"
#include "vipastain/error.hpp"
#include "vipastain/manifest.hpp"
#include "vipastain/png_io.hpp"

using namespace vipastain;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    args.insert(args.begin(), "vipastain");
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

}  // namespace

TEST_CASE("config parsing") {
    const auto c = PipelineConfig::parse("# comment\n[run]\nseed = 11\n\n[transfer]\nlambda_mask = 2.5\n"
                                         "mask_loss_mode = cross-entropy\n[detect]\nseeds = 1, 2\n");
    CHECK(c.desk.seed == 11);
    CHECK(c.desk.transfer.lambda_mask == 2.5);
    CHECK(c.desk.transfer.mask_loss_mode == transfer::MaskLossMode::cross_entropy);
    CHECK(c.desk.detector_seeds == std::vector<std::uint64_t>{1, 2});

    const auto again = PipelineConfig::parse(c.resolved());
    CHECK(again.resolved() == c.resolved());
    CHECK(again.hash() == c.hash());
    CHECK(c.hash().size() == 16);
    CHECK(c.hash() != PipelineConfig{}.hash());

    try {
        PipelineConfig::parse("[transfer]\nlambda_mask = 1\nbogus = 3\n", "my.cfg");
        FAIL("expected a usage error");
    } catch (const UsageError& e) {
        CHECK(std::string(e.what()).find("my.cfg:3") != std::string::npos);
    }
    CHECK_THROWS_AS(PipelineConfig::parse("[nowhere]\nx = 1\n"), UsageError);
    CHECK_THROWS_AS(PipelineConfig::parse("[transfer]\nepochs = many\n"), UsageError);
    CHECK_THROWS_AS(PipelineConfig::parse("seed = 1\n"), UsageError);
}

TEST_CASE("usage errors exit with 2 and name the flag") {
    const auto r = cli({"calibrate", "--stain", "he", "--out", "x.json"});
    CHECK(r.code == 2);
    CHECK(r.err.find("--manifest") != std::string::npos);
    CHECK(cli({"no-such-command"}).code == 2);
    CHECK(cli({}).code == 2);
    CHECK(cli({"calibrate", "--stain", "purple"}).code == 2);
    CHECK(cli({"--help"}).code == 0);
    CHECK(cli({"--set", "transfer.nope=1", "fid", "--set-a", "a", "--set-b", "b"}).code == 2);
}

TEST_CASE("runtime failures exit with 1") {
    TempDir d("cli_rt");
    const auto r = cli({"calibrate", "--stain", "he", "--manifest", (d.path / "missing.csv").string(), "--out",
                        (d.path / "t.json").string()});
    CHECK(r.code == 1);
    CHECK_FALSE(r.err.empty());
}

TEST_CASE("corpus, calibration, stitching and evaluation through the CLI") {
    TempDir d("cli_e2e");
    const fs::path corpus = d.path / "corpus";
    auto r = cli({"gen-corpus", "--out", corpus.string(), "--count", "12"});
    REQUIRE(r.code == 0);
    CHECK(fs::exists(corpus / "config.resolved"));
    const auto m = read_manifest(corpus / "manifest.csv");
    CHECK(m.rows.size() == 24);
    bool has_train = false, has_val = false;
    for (const auto& row : m.rows) {
        has_train |= row.split == "train";
        has_val |= row.split == "val";
    }
    CHECK(has_train);
    CHECK(has_val);

    const fs::path th = d.path / "th" / "he.json";
    r = cli({"calibrate", "--stain", "he", "--manifest", (corpus / "manifest.csv").string(), "--out", th.string(),
             "--masks-out", (d.path / "masks").string()});
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(slurp(th));
    CHECK(j.is_array());
    CHECK(j.size() == 2);
    CHECK(fs::exists(d.path / "th" / "config.resolved"));
    const std::string first = m.by_stain(Stain::he).front()->patch_id;
    for (const char* suffix : {"_mn.png", "_mr.png", "_mnr.png"}) CHECK(fs::exists(d.path / "masks" / (first + suffix)));

    // stitch a 2x1 grid written with the tile naming convention
    fs::create_directories(d.path / "tiles");
    const Image img = read_png(m.resolve(m.rows[0].image_path)), img2 = read_png(m.resolve(m.rows[1].image_path));
    write_png(d.path / "tiles" / "sl_x0_y0.png", img);
    write_png(d.path / "tiles" / "sl_x64_y0.png", img2);
    r = cli({"stitch", "--in", (d.path / "tiles").string(), "--width", "128", "--height", "64", "--out",
             (d.path / "big.png").string()});
    REQUIRE(r.code == 0);
    const Image big = read_png(d.path / "big.png");
    CHECK(big.width == 128);
    CHECK(big.at(64, 0, 0) == img2.at(0, 0, 0));
    CHECK(big.at(3, 5, 2) == img.at(3, 5, 2));

    // ground truth against itself
    const auto anns = read_annotations(corpus / "annotations.jsonl");
    std::vector<detect::Detection> dets;
    std::size_t boxes = 0;
    for (const auto& a : anns)
        for (const auto& b : a.boxes) {
            detect::Detection x;
            x.box = b;
            x.score = 0.9;
            x.image_id = a.patch_id;
            dets.push_back(x);
            ++boxes;
        }
    detect::write_detections(d.path / "dets.jsonl", dets);
    r = cli({"evaluate", "--dets", (d.path / "dets.jsonl").string(), "--gt", (corpus / "annotations.jsonl").string(),
             "--out", (d.path / "eval.json").string()});
    REQUIRE(r.code == 0);
    const auto rep = nlohmann::json::parse(r.out);
    CHECK(rep.at("tp").get<std::size_t>() == boxes);
    CHECK(rep.at("f1_box").get<double>() == doctest::Approx(boxes ? 1.0 : 0.0));

    r = cli({"fid", "--set-a", (corpus / "images").string(), "--set-b", (corpus / "images").string()});
    REQUIRE(r.code == 0);
    CHECK(std::abs(std::stod(r.out)) < 1e-6);
}

TEST_CASE("run directory honours VIPASTAIN_RUN_DIR") {
    TempDir d("cli_run");
    TempDir c("cli_run_corpus");
    REQUIRE(cli({"gen-corpus", "--out", c.path.string(), "--count", "6", "--stains", "he"}).code == 0);
    setenv("VIPASTAIN_RUN_DIR", d.path.string().c_str(), 1);
    const auto r = cli({"--set", "detect.epochs=1", "train-detector", "--mode", "he", "--manifest",
                        (c.path / "manifest.csv").string(), "--split", ""});
    unsetenv("VIPASTAIN_RUN_DIR");
    REQUIRE(r.code == 0);
    std::vector<fs::path> runs;
    for (const auto& e : fs::directory_iterator(d.path)) runs.push_back(e.path());
    REQUIRE(runs.size() == 1);
    CHECK(fs::exists(runs[0] / "config.resolved"));
    CHECK(fs::exists(runs[0] / "checkpoints" / "detector_he.ckpt"));
    CHECK(slurp(runs[0] / "config.resolved").find("epochs = 1\n") != std::string::npos);

    const auto det = cli({"detect", "--model", (runs[0] / "checkpoints" / "detector_he.ckpt").string(), "--manifest",
                          (c.path / "manifest.csv").string(), "--out", (d.path / "dets" / "d.jsonl").string()});
    CHECK(det.code == 0);
    CHECK(fs::exists(d.path / "dets" / "d.jsonl"));
}
