#include "vipastain/pipeline.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "vipastain/error.hpp"
#include "vipastain/patchio.hpp"
#include "vipastain/png_io.hpp"

namespace vipastain::pipeline {

namespace fs = std::filesystem;

DeskConfig::DeskConfig() {
    scene.decoy_cluster_count = 1;
    scene.decoy_cluster_density = 16;
    transfer.epochs = 15;
    detector.epochs = 60;
}

const ModeResult& SeedResult::mode(const std::string& label) const {
    for (const auto& m : modes)
        if (m.label == label) return m;
    throw Error("no detection mode '" + label + "' in report");
}

namespace {

template <class F>
auto stage(const std::string& name, const Logger& log, F&& f) {
    if (log) log("stage " + name);
    try {
        return f();
    } catch (const UsageError& e) {
        throw UsageError(name + ": " + e.what());
    } catch (const std::exception& e) {
        throw Error(name + ": " + e.what());
    }
}

void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream os(p);
    if (!os) throw IoError("cannot write " + p.string());
    os << text;
}

std::vector<Image> images_of(const DatasetManifest& m, const std::vector<const ManifestRow*>& rows) {
    std::vector<Image> out;
    for (const auto* r : rows) out.push_back(read_png(m.resolve(r->image_path)));
    return out;
}

std::vector<const ManifestRow*> rows_in(const DatasetManifest& m, Stain s, const std::string& split) {
    std::vector<const ManifestRow*> out;
    for (const auto* r : m.by_stain(s))
        if (r->split == split) out.push_back(r);
    return out;
}

}  // namespace

std::vector<Image> heldout_scenes(const DeskConfig& config, Stain stain) {
    std::vector<Image> out;
    for (int i = 0; i < config.fid_count; ++i) {
        synth::SceneSpec t = config.scene;
        t.seed = config.seed ^ 0xf1d0f1d0f1d0ULL;
        const synth::SceneSpec s = synth::corpus_scene_spec(t, stain, i, config.tls_fraction);
        out.push_back(stain == Stain::he ? synth::generate_pseudo_he(s).patch.image
                                         : synth::generate_pseudo_cd20(s).patch.image);
    }
    return out;
}

DeskReport repro_desk(const DeskConfig& cfg, const fs::path& run, const Logger& log) {
    DeskReport rep;
    for (const auto* sub : {"checkpoints", "patches", "masks", "dets", "reports"}) fs::create_directories(run / sub);

    // Corpus with unpaired layouts, split 8:2 by slide within each stain.
    DatasetManifest manifest = stage("corpus", log, [&] {
        synth::SceneSpec spec = cfg.scene;
        spec.seed = cfg.seed;
        synth::CorpusOptions opt;
        opt.slides = cfg.slides;
        opt.tls_fraction = cfg.tls_fraction;
        opt.paired_layouts = false;
        const DatasetManifest raw = synth::generate_corpus(spec, cfg.corpus_count, run / "corpus", opt);
        DatasetManifest out;
        out.root = run;
        for (Stain s : {Stain::he, Stain::cd20}) {
            DatasetManifest part;
            part.root = raw.root;
            for (const auto* r : raw.by_stain(s)) part.rows.push_back(*r);
            for (auto r : patchio::assign_splits(part, cfg.split_ratio, cfg.seed).rows) {
                r.image_path = "corpus/" + r.image_path;
                for (auto& mp : r.mask_paths) mp = "corpus/" + mp;
                r.annotation_path = "corpus/" + r.annotation_path;
                out.rows.push_back(std::move(r));
            }
        }
        return out;
    });
    const auto annotations = read_annotations(run / "corpus" / "annotations.jsonl");

    manifest.rows.reserve(manifest.rows.size() + manifest.by_stain(Stain::he).size());
    const auto he_train = rows_in(manifest, Stain::he, "train"), he_val = rows_in(manifest, Stain::he, "val");
    const auto cd_train = rows_in(manifest, Stain::cd20, "train");
    const std::vector<Image> he_train_img = images_of(manifest, he_train), cd_train_img = images_of(manifest, cd_train);
    rep.train_patches = static_cast<int>(he_train.size());
    rep.val_patches = static_cast<int>(he_val.size());

    const auto [th_he, th_cd] = stage("calibrate", log, [&] {
        auto a = masks::calibrate_domain(Stain::he, he_train_img);
        auto b = masks::calibrate_domain(Stain::cd20, cd_train_img);
        write_text(run / "masks" / "thresholds_he.json", masks::thresholds_to_json({a.blue, a.other}));
        write_text(run / "masks" / "thresholds_cd20.json", masks::thresholds_to_json({b.blue, b.other}));
        return std::pair{a, b};
    });
    rep.thresholds_he_blue = th_he.blue.thresholds;
    rep.thresholds_he_red = th_he.other.thresholds;
    rep.thresholds_cd20_blue = th_cd.blue.thresholds;
    rep.thresholds_cd20_green = th_cd.other.thresholds;

    auto train_transfer = [&](double lambda_mask, const std::string& tag) {
        return stage("train-transfer(" + tag + ")", log, [&] {
            transfer::TransferConfig tc = cfg.transfer;
            tc.lambda_mask = lambda_mask;
            tc.patch_size = cfg.scene.canvas_size;
            transfer::TrainOptions opt;
            opt.checkpoint_out = run / "checkpoints" / ("transfer_" + tag + ".ckpt");
            opt.loss_csv = run / "reports" / ("transfer_" + tag + "_losses.csv");
            return transfer::train(tc, he_train_img, cd_train_img, th_he, th_cd, opt);
        });
    };
    const transfer::TranslatorBundle guided = train_transfer(cfg.transfer.lambda_mask, "mask");
    const transfer::TranslatorBundle unguided = train_transfer(0.0, "nomask");

    stage("fid", log, [&] {
        const auto fx = eval::random_conv_extractor();
        const auto he = heldout_scenes(cfg, Stain::he), cd = heldout_scenes(cfg, Stain::cd20);
        std::vector<Image> v_guided, v_unguided;
        for (const auto& im : he) {
            v_guided.push_back(transfer::translate(guided, im, transfer::Direction::a2b));
            v_unguided.push_back(transfer::translate(unguided, im, transfer::Direction::a2b));
        }
        const auto f_cd = eval::extract_features(cd, fx), f_he = eval::extract_features(he, fx);
        const auto f_g = eval::extract_features(v_guided, fx);
        rep.fid_mask_guided = eval::frechet_distance(f_g, f_cd);
        rep.fid_no_mask = eval::frechet_distance(eval::extract_features(v_unguided, fx), f_cd);
        rep.fid_virtual_vs_he = eval::frechet_distance(f_g, f_he);
        rep.fid_he_vs_cd20 = eval::frechet_distance(f_he, f_cd);
        return 0;
    });

    // Virtual CD20 for every H&E patch, paired by patch_id.
    stage("synthesize", log, [&] {
        std::vector<ManifestRow> virt;
        for (const auto* r : manifest.by_stain(Stain::he)) {
            const Image v = transfer::translate(guided, read_png(manifest.resolve(r->image_path)),
                                                transfer::Direction::a2b);
            ManifestRow row = *r;
            row.stain = Stain::virtual_cd20;
            row.image_path = "patches/" + r->patch_id + "_virtual_cd20.png";
            row.mask_paths.clear();
            write_png(run / row.image_path, v);
            virt.push_back(std::move(row));
        }
        // rows_in() handed out pointers into manifest.rows; keep them valid
        if (manifest.rows.capacity() < manifest.rows.size() + virt.size())
            throw Error("repro_desk: manifest storage was not reserved for virtual rows");
        manifest.rows.insert(manifest.rows.end(), virt.begin(), virt.end());
        write_manifest(run / "manifest.csv", manifest);
        return 0;
    });

    // Ground truth for the validation H&E patches.
    std::vector<eval::GroundTruthPatch> gts;
    for (const auto* r : he_val) {
        eval::GroundTruthPatch g;
        g.id = r->patch_id;
        for (const auto& a : annotations)
            if (a.patch_id == r->patch_id) g.boxes = a.boxes;
        rep.val_tls += static_cast<int>(g.boxes.size());
        for (const auto& mp : r->mask_paths)
            if (mp.ends_with("_gt_tls.png")) g.mask = image_to_mask(read_png(manifest.resolve(mp)));
        g.width = g.height = cfg.scene.canvas_size;
        gts.push_back(std::move(g));
    }

    const std::vector<detect::DetectorSample> s_he = detect::samples_from_manifest(manifest, annotations, detect::Mode::he, "train");
    const auto s_cd = detect::samples_from_manifest(manifest, annotations, detect::Mode::cd20, "train");
    const auto s_fu = detect::samples_from_manifest(manifest, annotations, detect::Mode::fused, "train");
    const auto v_he = detect::samples_from_manifest(manifest, annotations, detect::Mode::he, "val");
    const auto v_cd = detect::samples_from_manifest(manifest, annotations, detect::Mode::cd20, "val");
    const auto v_fu = detect::samples_from_manifest(manifest, annotations, detect::Mode::fused, "val");

    for (std::uint64_t seed : cfg.detector_seeds) {
        SeedResult sr;
        sr.seed = seed;
        const std::string tag = "seed" + std::to_string(seed);
        auto run_mode = [&](detect::Mode mode, const std::vector<detect::DetectorSample>& train,
                            const std::vector<detect::DetectorSample>& val) {
            return stage("detect(" + detect::to_string(mode) + "," + tag + ")", log, [&] {
                detect::DetectorConfig dc = cfg.detector;
                dc.seed = seed;
                detect::DetectorTrainOptions opt;
                opt.curve_csv = run / "reports" / ("detector_" + detect::to_string(mode) + "_" + tag + ".csv");
                const auto model = detect::train_detector(dc, train, mode, opt);
                detect::save_detector(model, run / "checkpoints" / ("detector_" + detect::to_string(mode) + "_" + tag + ".ckpt"));
                std::vector<detect::Detection> dets;
                for (const auto& s : val) {
                    auto d = detect::detect_patch(model, s.input, s.id);
                    dets.insert(dets.end(), d.begin(), d.end());
                }
                detect::write_detections(run / "dets" / (detect::to_string(mode) + "_" + tag + ".jsonl"), dets);
                return dets;
            });
        };
        const auto d_he = run_mode(detect::Mode::he, s_he, v_he);
        const auto d_cd = run_mode(detect::Mode::cd20, s_cd, v_cd);
        const auto d_fu = run_mode(detect::Mode::fused, s_fu, v_fu);
        const auto d_co = detect::merge_detections(d_he, d_cd, cfg.merge_iou);
        detect::write_detections(run / "dets" / ("combine_" + tag + ".jsonl"), d_co);
        sr.modes.push_back({"he", eval::evaluate_detections(d_he, gts, cfg.match_iou)});
        sr.modes.push_back({"cd20", eval::evaluate_detections(d_cd, gts, cfg.match_iou)});
        sr.modes.push_back({"combine", eval::evaluate_detections(d_co, gts, cfg.match_iou)});
        sr.modes.push_back({"fused", eval::evaluate_detections(d_fu, gts, cfg.match_iou)});
        rep.seeds.push_back(std::move(sr));
    }

    write_text(run / "reports" / "desk_report.json", rep.to_json());
    write_text(run / "reports" / "desk_table.txt", rep.to_table());
    return rep;
}

std::string DeskReport::to_json() const {
    nlohmann::ordered_json j;
    j["thresholds"] = {{"he_blue", thresholds_he_blue},
                       {"he_red", thresholds_he_red},
                       {"cd20_blue", thresholds_cd20_blue},
                       {"cd20_green", thresholds_cd20_green}};
    j["fid"] = {{"mask_guided", fid_mask_guided},
                {"no_mask", fid_no_mask},
                {"virtual_vs_he", fid_virtual_vs_he},
                {"he_vs_cd20", fid_he_vs_cd20}};
    j["train_patches"] = train_patches;
    j["val_patches"] = val_patches;
    j["val_tls"] = val_tls;
    auto seeds_j = nlohmann::ordered_json::array();
    for (const auto& s : seeds) {
        nlohmann::ordered_json sj;
        sj["seed"] = s.seed;
        for (const auto& m : s.modes) sj[m.label] = nlohmann::ordered_json::parse(eval::report_to_json(m.report));
        seeds_j.push_back(sj);
    }
    j["detection"] = seeds_j;
    return j.dump(2) + "\n";
}

std::string DeskReport::to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    static const std::pair<const char*, const char*> rows[] = {
        {"he", "Only training by H&E"},
        {"cd20", "Only training by CD20"},
        {"combine", "Combine (NMS merge)"},
        {"fused", "Combine (six-channel)"},
    };
    for (const auto& s : seeds) {
        os << "detector seed " << s.seed << "\n";
        os << std::left << std::setw(24) << "Method" << std::right << std::setw(8) << "P_box" << std::setw(8) << "R_box"
           << std::setw(8) << "F1_box" << std::setw(8) << "P_mask" << std::setw(8) << "R_mask" << "\n";
        for (const auto& [label, name] : rows) {
            const auto& r = s.mode(label).report;
            os << std::left << std::setw(24) << name << std::right << std::setw(8) << 100 * r.box.precision
               << std::setw(8) << 100 * r.box.recall << std::setw(8) << 100 * r.f1_box << std::setw(8)
               << 100 * r.mask.precision << std::setw(8) << 100 * r.mask.recall << "\n";
        }
        os << "\n";
    }
    os << std::setprecision(4);
    os << std::left << std::setw(32) << "Method" << std::right << std::setw(10) << "FD" << "\n";
    os << std::left << std::setw(32) << "CycleGAN (lambda_mask = 0)" << std::right << std::setw(10) << fid_no_mask << "\n";
    os << std::left << std::setw(32) << "Mask-guided CycleGAN" << std::right << std::setw(10) << fid_mask_guided << "\n";
    return os.str();
}

}  // namespace vipastain::pipeline
