#include "vipastain/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "vipastain/config.hpp"
#include "vipastain/detect.hpp"
#include "vipastain/error.hpp"
#include "vipastain/evalmetrics.hpp"
#include "vipastain/manifest.hpp"
#include "vipastain/maskextract.hpp"
#include "vipastain/patchio.hpp"
#include "vipastain/pipeline.hpp"
#include "vipastain/png_io.hpp"
#include "vipastain/synthdata.hpp"
#include "vipastain/transfer.hpp"

namespace vipastain {

namespace fs = std::filesystem;

namespace {

struct Context {
    std::ostream& out;
    std::ostream& err;
    std::string command;
    std::string config_path;
    std::vector<std::string> overrides;
    std::string run_dir_flag;
    PipelineConfig config;

    void log(const std::string& msg) const {
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        gmtime_r(&now, &tm);
        err << "ts=" << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << " level=info cmd=" << command << " msg=\"" << msg
            << "\"" << std::endl;
    }

    void load_config() {
        config = config_path.empty() ? PipelineConfig{} : PipelineConfig::load(config_path);
        for (const auto& o : overrides) {
            const auto dot = o.find('.'), eq = o.find('=');
            if (dot == std::string::npos || eq == std::string::npos || dot > eq)
                throw UsageError("--set expects section.key=value, got '" + o + "'");
            config.set(o.substr(0, dot), o.substr(dot + 1, eq - dot - 1), o.substr(eq + 1));
        }
    }

    // {root}/{UTC timestamp}-{config hash}; VIPASTAIN_RUN_DIR replaces the root.
    fs::path run_dir() const {
        if (!run_dir_flag.empty()) return run_dir_flag;
        fs::path root = "runs";
        if (const char* env = std::getenv("VIPASTAIN_RUN_DIR"); env && *env) root = env;
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        gmtime_r(&now, &tm);
        std::ostringstream name;
        name << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-" << config.hash().substr(0, 8);
        return root / name.str();
    }

    void emit_config(const fs::path& dir) const {
        fs::create_directories(dir);
        std::ofstream os(dir / "config.resolved");
        if (!os) throw IoError("cannot write " + (dir / "config.resolved").string());
        os << config.resolved();
    }
};

void require(const std::string& value, const std::string& flag) {
    if (value.empty()) throw UsageError("missing required option " + flag);
}

fs::path parent_or_cwd(const fs::path& p) { return p.has_parent_path() ? p.parent_path() : fs::path("."); }

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::vector<fs::path> pngs_in(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw UsageError("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

Image load_patch(const fs::path& p, int rescale_from, int patch_size) {
    Image img = read_png(p);
    if (rescale_from > 0) {
        if (img.width != rescale_from || img.height != rescale_from)
            throw Error(p.string() + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                        ", --rescale-from expects " + std::to_string(rescale_from));
        img = patchio::resize_area(img, patch_size, patch_size);
    }
    return img;
}

masks::DomainThresholds thresholds_for(Stain s, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot read thresholds file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return masks::domain_from_sets(s, masks::thresholds_from_json(ss.str()));
}

masks::DomainThresholds calibrate_with_config(Stain s, const std::vector<Image>& imgs, const PipelineConfig& c) {
    const bool he = s == Stain::he;
    masks::DomainThresholds d;
    d.domain = s;
    d.blue = masks::calibrate(s, masks::Channel::b, imgs, he ? c.polarity_he_blue : c.polarity_cd20_blue,
                              c.otsu_levels, c.working_index);
    d.other = masks::calibrate(s, he ? masks::Channel::r : masks::Channel::g, imgs,
                               he ? c.polarity_he_red : c.polarity_cd20_green, c.otsu_levels, c.working_index);
    return d;
}

std::vector<Image> manifest_images(const DatasetManifest& m, Stain s, const std::string& split, int rescale_from,
                                   int patch_size) {
    std::vector<Image> out;
    for (const auto* r : m.by_stain(s))
        if (split.empty() || r->split == split) out.push_back(load_patch(m.resolve(r->image_path), rescale_from, patch_size));
    if (out.empty())
        throw Error("manifest has no " + to_string(s) + " rows" + (split.empty() ? "" : " in split '" + split + "'"));
    return out;
}

std::string write_mask_suffix(const std::string& kind) {
    if (kind == "nucleus") return "_mn";
    if (kind == "rbc") return "_mr";
    if (kind == "nucleus_plus_rbc") return "_mnr";
    return "_mp";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Context ctx{out, err, "", "", {}, "", {}};
    CLI::App app{"vipastain: mask-guided virtual staining and dual-stain TLS detection", "vipastain"};
    app.require_subcommand(1);
    app.add_option("--config", ctx.config_path, "Sectioned key = value config file");
    app.add_option("--set", ctx.overrides, "Override a config key: section.key=value (repeatable)");
    app.add_option("--run-dir", ctx.run_dir_flag, "Run directory (default: $VIPASTAIN_RUN_DIR or runs/, named by time and config hash)");

    // gen-corpus
    std::string gc_out, gc_stains = "he,cd20";
    int gc_count = -1;
    bool gc_paired = false;
    auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic pseudo-histology corpus");
    gen->add_option("--out", gc_out, "Output directory (default: {run}/corpus)");
    gen->add_option("--count", gc_count, "Patches per stain (default: [corpus] count)");
    gen->add_option("--stains", gc_stains, "Comma separated stains to render (he, cd20)");
    gen->add_flag("--paired", gc_paired, "Render both stains from the same layouts");

    // calibrate
    std::string cal_manifest, cal_out, cal_stain, cal_split, cal_masks;
    bool cal_per_patch = false;
    int rescale_from = 0;
    auto* cal = app.add_subcommand("calibrate", "Freeze multi-Otsu thresholds for a stain domain");
    cal->add_option("--manifest", cal_manifest, "Dataset manifest CSV");
    cal->add_option("--stain", cal_stain, "he or cd20")->check(CLI::IsMember({"he", "cd20"}));
    cal->add_option("--out", cal_out, "Thresholds JSON output");
    cal->add_option("--split", cal_split, "Only rows of this split (default: all rows)");
    cal->add_option("--masks-out", cal_masks, "Also write extracted masks (_mn/_mr/_mnr/_mp) here");
    cal->add_flag("--per-patch", cal_per_patch, "Re-derive thresholds per patch when writing masks");
    cal->add_option("--rescale-from", rescale_from, "Source patch size to area-resample down to [corpus] patch_size");

    // train-transfer
    std::string tt_he, tt_cd, tt_th_he, tt_th_cd, tt_out, tt_resume;
    auto* tt = app.add_subcommand("train-transfer", "Train the mask-guided H&E <-> CD20 translator");
    tt->add_option("--he", tt_he, "Manifest with H&E rows (domain A)");
    tt->add_option("--cd20", tt_cd, "Manifest with CD20 rows (domain B)");
    tt->add_option("--thresholds-he", tt_th_he, "Frozen H&E thresholds (default: calibrate on the training rows)");
    tt->add_option("--thresholds-cd20", tt_th_cd, "Frozen CD20 thresholds (default: calibrate on the training rows)");
    tt->add_option("--out", tt_out, "Checkpoint path (default: {run}/checkpoints/transfer.ckpt)");
    tt->add_option("--resume", tt_resume, "Resume from a checkpoint");
    tt->add_option("--rescale-from", rescale_from, "Source patch size to area-resample down to [corpus] patch_size");

    // synthesize
    std::string sy_ckpt, sy_dir = "a2b", sy_in, sy_out, sy_manifest, sy_image;
    int sy_patch = 0, sy_overlap = 0;
    auto* sy = app.add_subcommand("synthesize", "Translate patches (or a tiled image) with a trained translator");
    sy->add_option("--checkpoint", sy_ckpt, "Translator checkpoint");
    sy->add_option("--direction", sy_dir, "a2b (H&E -> CD20) or b2a")->check(CLI::IsMember({"a2b", "b2a"}));
    sy->add_option("--in", sy_in, "Directory of input PNG patches");
    sy->add_option("--manifest", sy_manifest, "Manifest; translated rows are appended as virtual stains");
    sy->add_option("--image", sy_image, "Large image: tiled, translated and stitched back");
    sy->add_option("--patch-size", sy_patch, "Tile size for --image (default: [corpus] patch_size)");
    sy->add_option("--overlap", sy_overlap, "Tile overlap for --image");
    sy->add_option("--out", sy_out, "Output directory (or PNG file with --image)");
    sy->add_option("--rescale-from", rescale_from, "Source patch size to area-resample down to [corpus] patch_size");

    // train-detector
    std::string td_mode, td_manifest, td_ann, td_split = "train", td_out;
    auto* td = app.add_subcommand("train-detector", "Train a TLS detector on H&E, virtual CD20 or both");
    td->add_option("--mode", td_mode, "he, cd20 or fused")->check(CLI::IsMember({"he", "cd20", "fused"}));
    td->add_option("--manifest", td_manifest, "Manifest (virtual_cd20 rows needed for cd20 and fused)");
    td->add_option("--annotations", td_ann, "Annotations JSONL (default: from the manifest rows)");
    td->add_option("--split", td_split, "Training split (empty: all rows)");
    td->add_option("--out", td_out, "Model path (default: {run}/checkpoints/detector_{mode}.ckpt)");

    // detect
    std::string de_model, de_manifest, de_out, de_split, de_image, de_slide = "slide";
    int de_overlap = 0;
    auto* de = app.add_subcommand("detect", "Run a trained detector");
    de->add_option("--model", de_model, "Detector checkpoint");
    de->add_option("--manifest", de_manifest, "Manifest of patches");
    de->add_option("--split", de_split, "Only rows of this split");
    de->add_option("--image", de_image, "Large H&E image (3-channel models): tiled, detections in slide frame");
    de->add_option("--slide-id", de_slide, "Slide id for --image");
    de->add_option("--overlap", de_overlap, "Tile overlap for --image");
    de->add_option("--out", de_out, "Detections JSONL");

    // stitch
    std::string st_in, st_out;
    int st_w = 0, st_h = 0;
    auto* st = app.add_subcommand("stitch", "Stitch {slide}_x{X}_y{Y}.png patches into one image");
    st->add_option("--in", st_in, "Directory of patches");
    st->add_option("--width", st_w, "Target width");
    st->add_option("--height", st_h, "Target height");
    st->add_option("--out", st_out, "Output PNG");

    // evaluate
    std::string ev_dets, ev_gt, ev_out, ev_masks;
    double ev_iou = -1;
    auto* ev = app.add_subcommand("evaluate", "Box and mask precision, recall and F1");
    ev->add_option("--dets", ev_dets, "Detections JSONL");
    ev->add_option("--gt", ev_gt, "Ground-truth annotations JSONL");
    ev->add_option("--iou", ev_iou, "Match IoU threshold (default: [eval] match_iou)");
    ev->add_option("--gt-masks", ev_masks, "Manifest whose *_gt_tls.png masks replace box-shaped ground truth");
    ev->add_option("--out", ev_out, "Report JSON (default: stdout only)");

    // fid
    std::string fid_a, fid_b;
    auto* fid = app.add_subcommand("fid", "Frechet distance between two image sets (random conv features)");
    fid->add_option("--set-a", fid_a, "Directory of PNGs");
    fid->add_option("--set-b", fid_b, "Directory of PNGs");
    fid->add_option("--rescale-from", rescale_from, "Source patch size to area-resample down to [corpus] patch_size");

    // repro-desk
    std::uint64_t rd_seed = 0;
    bool rd_seed_set = false;
    auto* rd = app.add_subcommand("repro-desk", "Desk-scale reproduction: detection modes and translation ablation");
    rd->add_option("--seed", rd_seed, "Corpus and translator seed (default: [run] seed)")->each([&](const std::string&) {
        rd_seed_set = true;
    });

    std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        ctx.load_config();
        PipelineConfig& cfg = ctx.config;
        const int patch_size = cfg.desk.scene.canvas_size;

        if (*gen) {
            ctx.command = "gen-corpus";
            const fs::path dir = gc_out.empty() ? ctx.run_dir() / "corpus" : fs::path(gc_out);
            synth::SceneSpec spec = cfg.desk.scene;
            spec.seed = cfg.desk.seed;
            synth::CorpusOptions opt;
            opt.slides = cfg.desk.slides;
            opt.tls_fraction = cfg.desk.tls_fraction;
            opt.paired_layouts = gc_paired;
            opt.stains.clear();
            std::istringstream is(gc_stains);
            for (std::string s; std::getline(is, s, ',');) opt.stains.push_back(stain_from_string(s));
            const int count = gc_count > 0 ? gc_count : cfg.desk.corpus_count;
            ctx.log("generating " + std::to_string(count) + " patches per stain into " + dir.string());
            const auto m = synth::generate_corpus(spec, count, dir, opt);
            write_manifest(dir / "manifest.csv", patchio::assign_splits(m, cfg.desk.split_ratio, cfg.desk.seed));
            ctx.emit_config(dir);
            out << (dir / "manifest.csv").string() << "\n";
            return 0;
        }

        if (*cal) {
            ctx.command = "calibrate";
            require(cal_manifest, "--manifest");
            require(cal_stain, "--stain");
            require(cal_out, "--out");
            const Stain s = stain_from_string(cal_stain);
            const DatasetManifest m = read_manifest(cal_manifest);
            const auto imgs = manifest_images(m, s, cal_split, rescale_from, patch_size);
            ctx.log("calibrating " + cal_stain + " on " + std::to_string(imgs.size()) + " patches");
            const auto d = calibrate_with_config(s, imgs, cfg);
            const fs::path outp = cal_out;
            ensure_parent(outp);
            std::ofstream os(outp);
            if (!os) throw IoError("cannot write " + outp.string());
            os << masks::thresholds_to_json({d.blue, d.other}) << "\n";
            if (!cal_masks.empty()) {
                masks::ExtractOptions eo;
                eo.min_component_px = cfg.min_component_px;
                eo.fill_holes = cfg.fill_holes;
                eo.per_patch = cal_per_patch;
                std::size_t i = 0;
                for (const auto* r : m.by_stain(s)) {
                    if (!cal_split.empty() && r->split != cal_split) continue;
                    const auto set = d.extract(imgs[i++], eo);
                    for (const auto& w : set.warnings) ctx.log(r->patch_id + ": " + w);
                    const std::pair<const char*, const std::optional<Mask>*> kinds[] = {
                        {"nucleus", &set.nucleus},
                        {"rbc", &set.rbc},
                        {"nucleus_plus_rbc", &set.nucleus_plus_rbc},
                        {"positive", &set.positive}};
                    for (const auto& [k, mk] : kinds)
                        if (*mk) write_png(fs::path(cal_masks) / (r->patch_id + write_mask_suffix(k) + ".png"), mask_to_image(**mk));
                }
            }
            ctx.emit_config(parent_or_cwd(outp));
            out << masks::thresholds_to_json({d.blue, d.other}) << "\n";
            return 0;
        }

        if (*tt) {
            ctx.command = "train-transfer";
            require(tt_he, "--he");
            require(tt_cd, "--cd20");
            const DatasetManifest ma = read_manifest(tt_he), mb = read_manifest(tt_cd);
            auto has_train = [](const DatasetManifest& m, Stain s) {
                for (const auto* r : m.by_stain(s))
                    if (r->split == "train") return true;
                return false;
            };
            const auto ia = manifest_images(ma, Stain::he, has_train(ma, Stain::he) ? "train" : "", rescale_from, patch_size);
            const auto ib = manifest_images(mb, Stain::cd20, has_train(mb, Stain::cd20) ? "train" : "", rescale_from, patch_size);
            const auto th_a = !tt_th_he.empty() ? thresholds_for(Stain::he, tt_th_he)
                              : !cfg.thresholds_path.empty() ? thresholds_for(Stain::he, cfg.thresholds_path)
                                                             : calibrate_with_config(Stain::he, ia, cfg);
            const auto th_b = !tt_th_cd.empty() ? thresholds_for(Stain::cd20, tt_th_cd) : calibrate_with_config(Stain::cd20, ib, cfg);
            const fs::path run = ctx.run_dir();
            transfer::TransferConfig tc = cfg.desk.transfer;
            tc.patch_size = patch_size;
            transfer::TrainOptions opt;
            opt.checkpoint_out = tt_out.empty() ? run / "checkpoints" / "transfer.ckpt" : fs::path(tt_out);
            opt.loss_csv = run / "reports" / "transfer_losses.csv";
            if (!tt_resume.empty()) opt.resume_from = fs::path(tt_resume);
            std::int64_t last = 0;
            opt.on_step = [&](const transfer::LossReport& r) {
                last = r.step;
                if (r.step % 500 == 0)
                    ctx.log("step " + std::to_string(r.step) + " l_gan_ab=" + std::to_string(r.l_gan_ab) +
                            " l_cycle_img=" + std::to_string(r.l_cycle_img));
            };
            ctx.log("training on " + std::to_string(ia.size()) + " H&E and " + std::to_string(ib.size()) + " CD20 patches");
            transfer::train(tc, ia, ib, th_a, th_b, opt);
            ctx.emit_config(run);
            ctx.log("finished at step " + std::to_string(last));
            out << opt.checkpoint_out->string() << "\n";
            return 0;
        }

        if (*sy) {
            ctx.command = "synthesize";
            require(sy_ckpt, "--checkpoint");
            require(sy_out, "--out");
            const auto dir = transfer::direction_from_string(sy_dir);
            const auto bundle = transfer::load_checkpoint(sy_ckpt);
            const int inputs = !sy_in.empty() + !sy_manifest.empty() + !sy_image.empty();
            if (inputs != 1) throw UsageError("synthesize needs exactly one of --in, --manifest, --image");
            if (!sy_image.empty()) {
                const Image big = read_png(sy_image);
                auto tiles = patchio::tile_image(big, sy_patch > 0 ? sy_patch : patch_size, sy_overlap, "slide");
                for (auto& t : tiles) t.patch.image = transfer::translate(bundle, t.patch.image, dir);
                const Image stitched = patchio::stitch_patches(tiles, big.width, big.height);
                ensure_parent(sy_out);
                write_png(sy_out, stitched);
                ctx.emit_config(parent_or_cwd(sy_out));
                out << sy_out << "\n";
                return 0;
            }
            if (!sy_in.empty()) {
                std::size_t n = 0;
                for (const auto& p : pngs_in(sy_in)) {
                    write_png(fs::path(sy_out) / p.filename(),
                              transfer::translate(bundle, load_patch(p, rescale_from, patch_size), dir));
                    ++n;
                }
                ctx.emit_config(sy_out);
                ctx.log("translated " + std::to_string(n) + " patches");
                return 0;
            }
            DatasetManifest m = read_manifest(sy_manifest);
            const Stain src = dir == transfer::Direction::a2b ? Stain::he : Stain::cd20;
            const Stain dst = dir == transfer::Direction::a2b ? Stain::virtual_cd20 : Stain::virtual_he;
            DatasetManifest outm;
            outm.root = fs::absolute(sy_out);
            for (const auto& r : m.rows) {
                ManifestRow copy = r;
                copy.image_path = fs::absolute(m.resolve(r.image_path)).string();
                for (auto& mp : copy.mask_paths) mp = fs::absolute(m.resolve(mp)).string();
                if (!copy.annotation_path.empty()) copy.annotation_path = fs::absolute(m.resolve(r.annotation_path)).string();
                outm.rows.push_back(copy);
            }
            std::size_t n = 0;
            for (const auto* r : m.by_stain(src)) {
                ManifestRow v = *r;
                v.stain = dst;
                v.image_path = "images/" + r->patch_id + "_" + to_string(dst) + ".png";
                v.mask_paths.clear();
                if (!v.annotation_path.empty()) v.annotation_path = fs::absolute(m.resolve(r->annotation_path)).string();
                write_png(fs::path(sy_out) / v.image_path,
                          transfer::translate(bundle, load_patch(m.resolve(r->image_path), rescale_from, patch_size), dir));
                outm.rows.push_back(std::move(v));
                ++n;
            }
            write_manifest(fs::path(sy_out) / "manifest.csv", outm);
            ctx.emit_config(sy_out);
            ctx.log("translated " + std::to_string(n) + " patches");
            out << (fs::path(sy_out) / "manifest.csv").string() << "\n";
            return 0;
        }

        if (*td) {
            ctx.command = "train-detector";
            require(td_mode, "--mode");
            require(td_manifest, "--manifest");
            const auto mode = detect::mode_from_string(td_mode);
            const DatasetManifest m = read_manifest(td_manifest);
            std::vector<Annotation> anns;
            if (!td_ann.empty()) {
                anns = read_annotations(td_ann);
            } else {
                std::map<std::string, bool> seen;
                for (const auto& r : m.rows)
                    if (!r.annotation_path.empty() && !seen[r.annotation_path]) {
                        seen[r.annotation_path] = true;
                        const auto a = read_annotations(m.resolve(r.annotation_path));
                        anns.insert(anns.end(), a.begin(), a.end());
                    }
            }
            const auto samples = detect::samples_from_manifest(m, anns, mode, td_split);
            const fs::path run = ctx.run_dir();
            detect::DetectorTrainOptions opt;
            opt.curve_csv = run / "reports" / ("detector_" + td_mode + "_curve.csv");
            opt.on_epoch = [&](int e, double l) {
                if (e % 10 == 0) ctx.log("epoch " + std::to_string(e) + " loss=" + std::to_string(l));
            };
            ctx.log("training " + td_mode + " detector on " + std::to_string(samples.size()) + " patches");
            const auto model = detect::train_detector(cfg.desk.detector, samples, mode, opt);
            const fs::path outp = td_out.empty() ? run / "checkpoints" / ("detector_" + td_mode + ".ckpt") : fs::path(td_out);
            detect::save_detector(model, outp);
            ctx.emit_config(run);
            out << outp.string() << "\n";
            return 0;
        }

        if (*de) {
            ctx.command = "detect";
            require(de_model, "--model");
            require(de_out, "--out");
            if (de_manifest.empty() == de_image.empty()) throw UsageError("detect needs exactly one of --manifest, --image");
            const auto model = detect::load_detector(de_model);
            std::vector<detect::Detection> dets;
            if (!de_image.empty()) {
                const Image big = read_png(de_image);
                std::vector<std::pair<patchio::GridPatchRef, Image>> patches;
                for (auto& t : patchio::tile_image(big, patch_size, de_overlap, de_slide))
                    patches.emplace_back(t.ref, std::move(t.patch.image));
                dets = detect::detect_wsi(model, patches);
            } else {
                const DatasetManifest m = read_manifest(de_manifest);
                const auto samples = detect::samples_from_manifest(m, {}, model.mode, de_split, false);
                for (const auto& s : samples) {
                    auto d = detect::detect_patch(model, s.input, s.id);
                    dets.insert(dets.end(), d.begin(), d.end());
                }
            }
            ensure_parent(de_out);
            detect::write_detections(de_out, dets);
            ctx.emit_config(parent_or_cwd(de_out));
            ctx.log(std::to_string(dets.size()) + " detections");
            return 0;
        }

        if (*st) {
            ctx.command = "stitch";
            require(st_in, "--in");
            require(st_out, "--out");
            if (st_w <= 0 || st_h <= 0) throw UsageError("stitch needs positive --width and --height");
            std::vector<patchio::TiledPatch> tiles;
            for (const auto& p : pngs_in(st_in)) {
                const std::string stem = p.stem().string();
                const auto xi = stem.rfind("_x"), yi = stem.rfind("_y");
                if (xi == std::string::npos || yi == std::string::npos || yi < xi)
                    throw UsageError("patch name " + p.filename().string() + " does not follow {slide}_x{X}_y{Y}.png");
                patchio::TiledPatch t;
                t.ref.slide_id = stem.substr(0, xi);
                t.ref.origin_x = std::stoi(stem.substr(xi + 2, yi - xi - 2));
                t.ref.origin_y = std::stoi(stem.substr(yi + 2));
                t.patch.image = read_png(p);
                t.ref.size = t.patch.image.width;
                t.ref.grid_x = t.ref.origin_x / std::max(1, t.ref.size);
                t.ref.grid_y = t.ref.origin_y / std::max(1, t.ref.size);
                tiles.push_back(std::move(t));
            }
            ensure_parent(st_out);
            write_png(st_out, patchio::stitch_patches(tiles, st_w, st_h));
            ctx.emit_config(parent_or_cwd(st_out));
            return 0;
        }

        if (*ev) {
            ctx.command = "evaluate";
            require(ev_dets, "--dets");
            require(ev_gt, "--gt");
            const double iou_thr = ev_iou > 0 ? ev_iou : cfg.desk.match_iou;
            const auto dets = detect::read_detections(ev_dets);
            std::map<std::string, Mask> gt_masks;
            if (!ev_masks.empty()) {
                const DatasetManifest m = read_manifest(ev_masks);
                for (const auto& r : m.rows)
                    for (const auto& mp : r.mask_paths)
                        if (mp.ends_with("_gt_tls.png")) gt_masks[r.patch_id] = image_to_mask(read_png(m.resolve(mp)));
            }
            std::vector<eval::GroundTruthPatch> gts;
            for (const auto& a : read_annotations(ev_gt)) {
                eval::GroundTruthPatch g;
                g.id = a.patch_id;
                g.boxes = a.boxes;
                if (auto it = gt_masks.find(a.patch_id); it != gt_masks.end()) {
                    g.mask = it->second;
                    g.width = it->second.width;
                    g.height = it->second.height;
                } else {
                    g.width = g.height = patch_size;
                }
                gts.push_back(std::move(g));
            }
            const auto rep = eval::evaluate_detections(dets, gts, iou_thr);
            const std::string j = eval::report_to_json(rep);
            if (!ev_out.empty()) {
                const fs::path outp = ev_out;
                ensure_parent(outp);
                std::ofstream os(outp);
                if (!os) throw IoError("cannot write " + outp.string());
                os << j << "\n";
                ctx.emit_config(parent_or_cwd(outp));
            }
            out << j << "\n";
            return 0;
        }

        if (*fid) {
            ctx.command = "fid";
            require(fid_a, "--set-a");
            require(fid_b, "--set-b");
            auto load = [&](const std::string& d) {
                std::vector<Image> v;
                for (const auto& p : pngs_in(d)) v.push_back(load_patch(p, rescale_from, patch_size));
                return v;
            };
            const auto fx = eval::random_conv_extractor();
            const double d = eval::frechet_distance(eval::extract_features(load(fid_a), fx),
                                                    eval::extract_features(load(fid_b), fx));
            out << std::setprecision(10) << d << "\n";
            return 0;
        }

        if (*rd) {
            ctx.command = "repro-desk";
            if (rd_seed_set) cfg.desk.seed = rd_seed;
            const fs::path run = ctx.run_dir();
            ctx.emit_config(run);
            ctx.log("run directory " + run.string());
            const auto t0 = std::chrono::steady_clock::now();
            const auto rep = pipeline::repro_desk(cfg.desk, run, [&](const std::string& m) { ctx.log(m); });
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            ctx.log("finished in " + std::to_string(static_cast<int>(secs)) + " s");
            out << rep.to_table();
            out << "report: " << (run / "reports" / "desk_report.json").string() << "\n";
            return 0;
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace vipastain
