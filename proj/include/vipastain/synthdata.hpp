#pragma once

// Procedural pseudo-histology with exact ground truth.
//
// Both stains are rendered from the same geometric layout for a given seed,
// so an H&E scene and a CD20 scene with equal SceneSpec show the same nuclei,
// red blood cells and TLS clusters. Colours are chosen per channel so that
// the blue/red (H&E) and blue/green (CD20) extraction rules isolate exactly
// one structure kind each.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "vipastain/image.hpp"
#include "vipastain/manifest.hpp"

namespace vipastain::synth {

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
    friend bool operator==(const Rgb&, const Rgb&) = default;
};

// Structures with a falloff blend from `core` (centre) towards `rim`
// following exp(-falloff * rho^2), rho the normalised elliptical radius.
struct Palette {
    Rgb eosin_background{236, 170, 228};
    Rgb hematoxylin_core{0, 0, 0};
    Rgb hematoxylin_rim{200, 150, 215};
    Rgb red_blood_cell{185, 40, 228};
    Rgb ihc_background{228, 226, 224};
    Rgb counterstain_core{60, 226, 0};
    Rgb counterstain_rim{180, 225, 215};
    Rgb dab_core{90, 0, 223};
    Rgb dab_rim{200, 215, 222};

    bool all_distinct() const;
};

struct SceneSpec {
    int canvas_size = 64;
    int nucleus_count = 18;  // scattered nuclei outside TLS clusters
    double nucleus_radius_min = 2.5;
    double nucleus_radius_max = 4.0;
    int rbc_blob_count = 3;
    double rbc_radius_min = 2.5;
    double rbc_radius_max = 4.0;
    int tls_cluster_count = 1;
    int tls_cluster_density = 22;     // nuclei per cluster
    double tls_cluster_radius = 12.0;  // disc holding cluster nucleus centres
    double positive_halo = 12.0;      // DAB margin beyond the outermost cluster nucleus
    // Loose nucleus aggregates of TLS size without B cells: no DAB, no TLS box.
    int decoy_cluster_count = 0;
    int decoy_cluster_density = 10;
    double falloff = 1.6;
    Palette palette;
    double noise_sigma = 6.0;
    std::uint64_t seed = 0;

    void validate() const;  // throws UsageError
};

struct GroundTruth {
    Mask nucleus_mask;
    Mask rbc_mask;
    Mask positive_mask;
    std::vector<Box> tls_boxes;
    std::vector<Mask> tls_masks;
    std::vector<std::pair<double, double>> nucleus_centroids;
};

struct Scene {
    Patch patch;
    GroundTruth truth;
};

Scene generate_pseudo_he(const SceneSpec& spec);
Scene generate_pseudo_cd20(const SceneSpec& spec);

struct CorpusOptions {
    std::vector<Stain> stains{Stain::he, Stain::cd20};
    double tls_fraction = 0.75;  // share of patches carrying the template's TLS clusters
    int slides = 10;
    // When false, CD20 scenes use seeds disjoint from H&E scenes (unpaired domains).
    bool paired_layouts = false;
};

// Per-patch seed derived from the template seed, the stain and the index.
std::uint64_t derive_seed(std::uint64_t template_seed, Stain stain, int index);

// Scene of corpus patch `index`: seed derived from the template, TLS clusters
// kept with probability tls_fraction, decoy aggregates only in patches
// without TLS.
SceneSpec corpus_scene_spec(const SceneSpec& spec_template, Stain seed_stain, int index, double tls_fraction);

// Writes images/, masks/, annotations.jsonl and manifest.csv under out_dir.
DatasetManifest generate_corpus(const SceneSpec& spec_template, int count,
                                const std::filesystem::path& out_dir,
                                const CorpusOptions& options = {});

}  // namespace vipastain::synth
