#include "vipastain/png_io.hpp"

#include <png.h>

#include <cstring>

#include "vipastain/error.hpp"

namespace vipastain {

namespace {

struct PngImageGuard {
    png_image img{};
    PngImageGuard() {
        std::memset(&img, 0, sizeof img);
        img.version = PNG_IMAGE_VERSION;
    }
    ~PngImageGuard() { png_image_free(&img); }
    PngImageGuard(const PngImageGuard&) = delete;
    PngImageGuard& operator=(const PngImageGuard&) = delete;
};

}  // namespace

Image read_png(const std::filesystem::path& path) {
    PngImageGuard g;
    if (!png_image_begin_read_from_file(&g.img, path.c_str()))
        throw IoError("cannot read PNG " + path.string() + ": " + g.img.message);
    const bool grey = (g.img.format & PNG_FORMAT_FLAG_COLOR) == 0;
    g.img.format = grey ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    Image out(static_cast<int>(g.img.width), static_cast<int>(g.img.height), grey ? 1 : 3);
    if (!png_image_finish_read(&g.img, nullptr, out.data.data(), 0, nullptr))
        throw IoError("cannot decode PNG " + path.string() + ": " + g.img.message);
    return out;
}

void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3)
        throw IoError("PNG writer supports 1 or 3 channels, got " + std::to_string(img.channels) +
                      " for " + path.string());
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    PngImageGuard g;
    g.img.width = static_cast<png_uint_32>(img.width);
    g.img.height = static_cast<png_uint_32>(img.height);
    g.img.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&g.img, path.c_str(), 0, img.data.data(), 0, nullptr))
        throw IoError("cannot write PNG " + path.string() + ": " + g.img.message);
}

}  // namespace vipastain
