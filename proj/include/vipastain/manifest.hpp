#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vipastain/image.hpp"

namespace vipastain {

struct ManifestRow {
    std::string patch_id;
    Stain stain = Stain::he;
    std::string split;  // "", "train" or "val"
    std::string image_path;
    std::vector<std::string> mask_paths;
    std::string annotation_path;

    // Slide id is the patch_id prefix up to "_x" (see patch_file_name).
    std::string slide_id() const;
};

// Rows sharing a patch_id across stains are pairs (an H&E patch and its
// virtual CD20 counterpart). Relative paths resolve against `root`.
struct DatasetManifest {
    std::filesystem::path root;
    std::vector<ManifestRow> rows;

    std::vector<const ManifestRow*> by_stain(Stain s) const;
    const ManifestRow* find(const std::string& patch_id, Stain s) const;
    std::filesystem::path resolve(const std::string& rel) const;
};

inline constexpr const char* kManifestHeader =
    "patch_id,stain,split,image_path,mask_paths,annotation_path";

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& path);

// One annotation line: {"patch_id", "boxes": [[x,y,w,h],...]}.
struct Annotation {
    std::string patch_id;
    std::vector<Box> boxes;
};

void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& anns);
std::vector<Annotation> read_annotations(const std::filesystem::path& path);

}  // namespace vipastain
