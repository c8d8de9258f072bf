#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vipastain/image.hpp"
#include "vipastain/manifest.hpp"

namespace vipastain::patchio {

struct GridPatchRef {
    std::string slide_id;
    int grid_x = 0;
    int grid_y = 0;
    int origin_x = 0;
    int origin_y = 0;
    int size = 0;
    std::string path;
};

struct TiledPatch {
    GridPatchRef ref;
    Patch patch;
};

// {slide_id}_x{origin_x}_y{origin_y}.png
std::string patch_file_name(const GridPatchRef& ref);

// Covers the whole image with stride patch_size - overlap; tiles running past
// the border are reflection padded.
std::vector<TiledPatch> tile_image(const Image& image, int patch_size, int overlap,
                                   const std::string& slide_id = "slide");

// Overlaps are averaged (rounded half up); output cropped to target dims.
Image stitch_patches(std::span<const TiledPatch> tiles, int target_width, int target_height);

// Area-average resampling (used for --rescale-from).
Image resize_area(const Image& image, int width, int height);

// Per-channel mean/std in an orthonormal opponent space (l, alpha, beta).
struct StainStats {
    std::array<double, 3> mean{};
    std::array<double, 3> stddev{1, 1, 1};
};

inline constexpr double kStdEpsilon = 1e-6;

std::array<double, 3> rgb_to_opponent(double r, double g, double b);
std::array<double, 3> opponent_to_rgb(double l, double a, double bb);

// Tissue pixels are those not near-white (some channel < 240); if no image
// has any, every pixel counts.
StainStats compute_stain_stats(std::span<const Image> images);
Image normalize_stain(const Image& image, const StainStats& reference);

std::string stain_stats_to_json(const StainStats& s);
StainStats stain_stats_from_json(const std::string& text);

// Slide-stratified split: floor(ratio * slides), at least one slide per side.
std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest, double ratio,
                                                          std::uint64_t seed);

// Marks rows in place of a copy with "train"/"val".
DatasetManifest assign_splits(const DatasetManifest& manifest, double ratio, std::uint64_t seed);

}  // namespace vipastain::patchio
