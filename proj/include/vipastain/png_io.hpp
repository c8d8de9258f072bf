#pragma once

#include <filesystem>

#include "vipastain/image.hpp"

namespace vipastain {

// 8-bit grey (1 channel) or RGB (3 channels). Throws IoError naming the path.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

}  // namespace vipastain
