#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace vipastain {

enum class Stain { he, cd20, virtual_cd20, virtual_he };

std::string to_string(Stain s);
Stain stain_from_string(const std::string& s);

// Interleaved 8-bit image, row-major, `channels` samples per pixel.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> data;

    Image() = default;
    Image(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * h * c, fill) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    bool empty() const { return data.empty(); }

    std::uint8_t& at(int x, int y, int c = 0) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int x, int y, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
    friend bool operator==(const Image&, const Image&) = default;
};

// Binary mask, one byte per pixel, values 0 or 1.
struct Mask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

    std::uint8_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

    std::size_t count() const;
    bool any() const { return count() > 0; }
    bool same_shape(const Mask& o) const { return width == o.width && height == o.height; }
    friend bool operator==(const Mask&, const Mask&) = default;
};

// Single-channel float map in [0,1] (soft masks).
struct SoftMask {
    int width = 0;
    int height = 0;
    std::vector<double> data;
};

// RGB tile plus its provenance.
struct Patch {
    std::string slide_id;
    int grid_x = 0;
    int grid_y = 0;
    Stain stain = Stain::he;
    Image image;
};

struct Box {
    double x = 0;
    double y = 0;
    double w = 0;
    double h = 0;
    friend bool operator==(const Box&, const Box&) = default;
};

Mask mask_xor(const Mask& a, const Mask& b);
Mask mask_and(const Mask& a, const Mask& b);
Mask mask_or(const Mask& a, const Mask& b);
double mask_iou(const Mask& a, const Mask& b);  // 1 when both empty
Image mask_to_image(const Mask& m);              // 0/255 single channel
Mask image_to_mask(const Image& img);            // nonzero -> 1

}  // namespace vipastain
