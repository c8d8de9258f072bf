#pragma once

#include <filesystem>
#include <string>

#include "vipastain/maskextract.hpp"
#include "vipastain/pipeline.hpp"

namespace vipastain {

// Plain-text configuration:
//
//   # comment
//   [transfer]
//   epochs = 25
//   lambda_mask = 5
//
// Unknown sections or keys are rejected. resolved() prints every key, so a
// run can be reproduced from its emitted config alone.
struct PipelineConfig {
    pipeline::DeskConfig desk;
    std::string thresholds_path;  // empty: calibrate
    int otsu_levels = masks::kDefaultLevels;
    int working_index = masks::kDefaultWorkingIndex;
    masks::Polarity polarity_he_blue = masks::Polarity::keep_below;
    masks::Polarity polarity_he_red = masks::Polarity::keep_below;
    masks::Polarity polarity_cd20_blue = masks::Polarity::keep_below;
    masks::Polarity polarity_cd20_green = masks::Polarity::keep_below;
    int min_component_px = -1;
    bool fill_holes = true;

    static PipelineConfig parse(const std::string& text, const std::string& origin = "<config>");
    static PipelineConfig load(const std::filesystem::path& path);
    std::string resolved() const;
    std::string hash() const;  // 16 hex digits of FNV-1a over resolved()
    void set(const std::string& section, const std::string& key, const std::string& value);
};

}  // namespace vipastain
