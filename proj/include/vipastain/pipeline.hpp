#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vipastain/detect.hpp"
#include "vipastain/evalmetrics.hpp"
#include "vipastain/maskextract.hpp"
#include "vipastain/synthdata.hpp"
#include "vipastain/transfer.hpp"

// End-to-end desk-scale comparison: H&E-only vs virtual-CD20-only vs combined
// detection, and mask-guided vs unguided translation quality.
namespace vipastain::pipeline {

struct DeskConfig {
    std::uint64_t seed = 7;
    synth::SceneSpec scene;
    int corpus_count = 400;  // patches per stain
    int slides = 10;
    double tls_fraction = 0.75;
    double split_ratio = 0.8;
    int fid_count = 128;  // held-out scenes per set for the Frechet distance
    transfer::TransferConfig transfer;
    detect::DetectorConfig detector;
    std::vector<std::uint64_t> detector_seeds{7, 8, 9};
    double match_iou = 0.5;
    double merge_iou = 0.5;

    DeskConfig();
};

struct ModeResult {
    std::string label;  // he, cd20, combine, fused
    eval::DetectionReport report;
};

struct SeedResult {
    std::uint64_t seed = 0;
    std::vector<ModeResult> modes;

    const ModeResult& mode(const std::string& label) const;
};

struct DeskReport {
    std::vector<int> thresholds_he_blue, thresholds_he_red, thresholds_cd20_blue, thresholds_cd20_green;
    double fid_mask_guided = 0;   // virtual CD20 (lambda_mask > 0) vs real pseudo-CD20
    double fid_no_mask = 0;       // same with lambda_mask = 0
    double fid_virtual_vs_he = 0; // virtual CD20 against the H&E it came from
    double fid_he_vs_cd20 = 0;    // untranslated reference
    std::vector<SeedResult> seeds;
    int train_patches = 0, val_patches = 0, val_tls = 0;

    std::string to_json() const;
    std::string to_table() const;
};

using Logger = std::function<void(const std::string&)>;

// Runs every stage under run_dir (corpus/, checkpoints/, patches/, masks/,
// dets/, reports/). Errors are rethrown prefixed with the stage name.
DeskReport repro_desk(const DeskConfig& config, const std::filesystem::path& run_dir, const Logger& log = {});

// Translation quality: Frechet distance between translated held-out H&E and
// held-out real CD20 scenes.
std::vector<Image> heldout_scenes(const DeskConfig& config, Stain stain);

}  // namespace vipastain::pipeline
