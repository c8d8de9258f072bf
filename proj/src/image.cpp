#include "vipastain/image.hpp"

#include <algorithm>

#include "vipastain/error.hpp"

namespace vipastain {

std::string to_string(Stain s) {
    switch (s) {
        case Stain::he: return "he";
        case Stain::cd20: return "cd20";
        case Stain::virtual_cd20: return "virtual_cd20";
        case Stain::virtual_he: return "virtual_he";
    }
    return "he";
}

Stain stain_from_string(const std::string& s) {
    if (s == "he") return Stain::he;
    if (s == "cd20") return Stain::cd20;
    if (s == "virtual_cd20") return Stain::virtual_cd20;
    if (s == "virtual_he") return Stain::virtual_he;
    throw Error("unknown stain '" + s + "'");
}

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

namespace {

template <class Op>
Mask combine(const Mask& a, const Mask& b, Op op) {
    if (!a.same_shape(b)) throw Error("mask dimension mismatch");
    Mask out(a.width, a.height);
    for (std::size_t i = 0; i < a.data.size(); ++i)
        out.data[i] = op(a.data[i] != 0, b.data[i] != 0) ? 1 : 0;
    return out;
}

}  // namespace

Mask mask_xor(const Mask& a, const Mask& b) { return combine(a, b, [](bool x, bool y) { return x != y; }); }
Mask mask_and(const Mask& a, const Mask& b) { return combine(a, b, [](bool x, bool y) { return x && y; }); }
Mask mask_or(const Mask& a, const Mask& b) { return combine(a, b, [](bool x, bool y) { return x || y; }); }

double mask_iou(const Mask& a, const Mask& b) {
    if (!a.same_shape(b)) throw Error("mask dimension mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool x = a.data[i] != 0, y = b.data[i] != 0;
        inter += (x && y);
        uni += (x || y);
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Image mask_to_image(const Mask& m) {
    Image img(m.width, m.height, 1);
    for (std::size_t i = 0; i < m.data.size(); ++i) img.data[i] = m.data[i] ? 255 : 0;
    return img;
}

Mask image_to_mask(const Image& img) {
    if (img.channels != 1) throw Error("mask image must be single-channel");
    Mask m(img.width, img.height);
    for (std::size_t i = 0; i < img.data.size(); ++i) m.data[i] = img.data[i] ? 1 : 0;
    return m;
}

}  // namespace vipastain
