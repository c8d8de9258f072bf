#include "vipastain/patchio.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>
#include <random>
#include <set>

#include "vipastain/error.hpp"

namespace vipastain::patchio {

std::string patch_file_name(const GridPatchRef& ref) {
    return ref.slide_id + "_x" + std::to_string(ref.origin_x) + "_y" + std::to_string(ref.origin_y) + ".png";
}

namespace {

int reflect(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

int tiles_along(int extent, int size, int stride) {
    if (extent <= size) return 1;
    return (extent - size + stride - 1) / stride + 1;
}

}  // namespace

std::vector<TiledPatch> tile_image(const Image& image, int patch_size, int overlap, const std::string& slide_id) {
    if (patch_size < 64) throw Error("tile_image: patch_size must be >= 64");
    if (overlap < 0 || overlap >= patch_size) throw Error("tile_image: overlap must lie in [0, patch_size)");
    if (image.width < patch_size || image.height < patch_size)
        throw Error("tile_image: image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                    " is smaller than one " + std::to_string(patch_size) + " px patch");
    const int stride = patch_size - overlap;
    const int nx = tiles_along(image.width, patch_size, stride);
    const int ny = tiles_along(image.height, patch_size, stride);
    std::vector<TiledPatch> out;
    out.reserve(static_cast<std::size_t>(nx) * ny);
    for (int gy = 0; gy < ny; ++gy) {
        for (int gx = 0; gx < nx; ++gx) {
            TiledPatch t;
            t.ref = {slide_id, gx, gy, gx * stride, gy * stride, patch_size, {}};
            t.ref.path = patch_file_name(t.ref);
            t.patch.slide_id = slide_id;
            t.patch.grid_x = gx;
            t.patch.grid_y = gy;
            t.patch.image = Image(patch_size, patch_size, image.channels);
            for (int y = 0; y < patch_size; ++y) {
                const int sy = reflect(t.ref.origin_y + y, image.height);
                for (int x = 0; x < patch_size; ++x) {
                    const int sx = reflect(t.ref.origin_x + x, image.width);
                    for (int c = 0; c < image.channels; ++c) t.patch.image.at(x, y, c) = image.at(sx, sy, c);
                }
            }
            out.push_back(std::move(t));
        }
    }
    return out;
}

Image stitch_patches(std::span<const TiledPatch> tiles, int target_width, int target_height) {
    if (tiles.empty()) throw Error("stitch_patches: no patches");
    const int channels = tiles.front().patch.image.channels;
    const int size = tiles.front().ref.size;
    for (const auto& t : tiles) {
        if (t.ref.size != size || t.patch.image.width != size || t.patch.image.height != size ||
            t.patch.image.channels != channels)
            throw Error("stitch_patches: inconsistent patch size");
    }
    const std::size_t npx = static_cast<std::size_t>(target_width) * target_height;
    std::vector<std::uint32_t> sum(npx * channels, 0), count(npx, 0);
    for (const auto& t : tiles) {
        for (int y = 0; y < size; ++y) {
            const int ty = t.ref.origin_y + y;
            if (ty < 0 || ty >= target_height) continue;
            for (int x = 0; x < size; ++x) {
                const int tx = t.ref.origin_x + x;
                if (tx < 0 || tx >= target_width) continue;
                const std::size_t p = static_cast<std::size_t>(ty) * target_width + tx;
                ++count[p];
                for (int c = 0; c < channels; ++c) sum[p * channels + c] += t.patch.image.at(x, y, c);
            }
        }
    }
    if (std::find(count.begin(), count.end(), 0u) != count.end()) {
        // Infer the stride from the origins to name the missing cells.
        int stride = size;
        for (const auto& t : tiles) {
            if (t.ref.origin_x > 0) stride = std::min(stride, t.ref.origin_x);
            if (t.ref.origin_y > 0) stride = std::min(stride, t.ref.origin_y);
        }
        std::set<std::pair<int, int>> present;
        for (const auto& t : tiles) present.insert({t.ref.origin_x / stride, t.ref.origin_y / stride});
        std::string missing;
        const int nx = tiles_along(target_width, size, stride), ny = tiles_along(target_height, size, stride);
        for (int gy = 0; gy < ny; ++gy)
            for (int gx = 0; gx < nx; ++gx)
                if (!present.count({gx, gy}))
                    missing += " (" + std::to_string(gx) + "," + std::to_string(gy) + ")";
        throw Error("stitch_patches: coverage gap, missing grid cells:" + missing);
    }
    Image out(target_width, target_height, channels);
    for (std::size_t p = 0; p < npx; ++p)
        for (int c = 0; c < channels; ++c)
            out.data[p * channels + c] = static_cast<std::uint8_t>((2 * sum[p * channels + c] + count[p]) / (2 * count[p]));
    return out;
}

Image resize_area(const Image& image, int width, int height) {
    if (width <= 0 || height <= 0) throw Error("resize_area: bad target size");
    Image out(width, height, image.channels);
    const double sx = static_cast<double>(image.width) / width, sy = static_cast<double>(image.height) / height;
    for (int y = 0; y < height; ++y) {
        const double y0 = y * sy, y1 = (y + 1) * sy;
        for (int x = 0; x < width; ++x) {
            const double x0 = x * sx, x1 = (x + 1) * sx;
            for (int c = 0; c < image.channels; ++c) {
                double acc = 0, wsum = 0;
                for (int yy = static_cast<int>(y0); yy < std::min(image.height, static_cast<int>(std::ceil(y1))); ++yy) {
                    const double wy = std::min<double>(yy + 1, y1) - std::max<double>(yy, y0);
                    for (int xx = static_cast<int>(x0); xx < std::min(image.width, static_cast<int>(std::ceil(x1))); ++xx) {
                        const double wx = std::min<double>(xx + 1, x1) - std::max<double>(xx, x0);
                        acc += wx * wy * image.at(xx, yy, c);
                        wsum += wx * wy;
                    }
                }
                out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(acc / wsum), 0L, 255L));
            }
        }
    }
    return out;
}

std::array<double, 3> rgb_to_opponent(double r, double g, double b) {
    static const double k3 = 1.0 / std::sqrt(3.0), k6 = 1.0 / std::sqrt(6.0), k2 = 1.0 / std::sqrt(2.0);
    return {(r + g + b) * k3, (r + g - 2 * b) * k6, (r - g) * k2};
}

std::array<double, 3> opponent_to_rgb(double l, double a, double bb) {
    static const double k3 = 1.0 / std::sqrt(3.0), k6 = 1.0 / std::sqrt(6.0), k2 = 1.0 / std::sqrt(2.0);
    return {l * k3 + a * k6 + bb * k2, l * k3 + a * k6 - bb * k2, l * k3 - 2 * a * k6};
}

namespace {

bool is_tissue(const std::uint8_t* px) { return std::min({px[0], px[1], px[2]}) < 240; }

StainStats stats_over(std::span<const Image> images, bool tissue_only) {
    std::array<double, 3> sum{}, sq{};
    double n = 0;
    for (const auto& img : images) {
        if (img.channels != 3) throw Error("stain statistics need RGB images");
        for (std::size_t i = 0; i < img.pixel_count(); ++i) {
            const auto* px = &img.data[i * 3];
            if (tissue_only && !is_tissue(px)) continue;
            const auto o = rgb_to_opponent(px[0], px[1], px[2]);
            for (int c = 0; c < 3; ++c) {
                sum[c] += o[c];
                sq[c] += o[c] * o[c];
            }
            n += 1;
        }
    }
    StainStats s;
    if (n == 0) return s;
    for (int c = 0; c < 3; ++c) {
        s.mean[c] = sum[c] / n;
        const double var = std::max(0.0, sq[c] / n - s.mean[c] * s.mean[c]);
        s.stddev[c] = std::max(kStdEpsilon, std::sqrt(var));
    }
    return s;
}

bool any_tissue(std::span<const Image> images) {
    for (const auto& img : images)
        for (std::size_t i = 0; i < img.pixel_count(); ++i)
            if (is_tissue(&img.data[i * 3])) return true;
    return false;
}

}  // namespace

StainStats compute_stain_stats(std::span<const Image> images) {
    if (images.empty()) throw Error("compute_stain_stats: no images");
    return stats_over(images, any_tissue(images));
}

Image normalize_stain(const Image& image, const StainStats& reference) {
    const StainStats own = compute_stain_stats(std::span(&image, 1));
    Image out(image.width, image.height, 3);
    for (std::size_t i = 0; i < image.pixel_count(); ++i) {
        const auto* px = &image.data[i * 3];
        auto o = rgb_to_opponent(px[0], px[1], px[2]);
        for (int c = 0; c < 3; ++c)
            o[c] = (o[c] - own.mean[c]) / own.stddev[c] * std::max(kStdEpsilon, reference.stddev[c]) + reference.mean[c];
        const auto rgb = opponent_to_rgb(o[0], o[1], o[2]);
        for (int c = 0; c < 3; ++c)
            out.data[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(rgb[c]), 0L, 255L));
    }
    return out;
}

std::string stain_stats_to_json(const StainStats& s) {
    nlohmann::json j = {{"l_mean", s.mean[0]},   {"alpha_mean", s.mean[1]},   {"beta_mean", s.mean[2]},
                        {"l_std", s.stddev[0]}, {"alpha_std", s.stddev[1]}, {"beta_std", s.stddev[2]}};
    return j.dump(2);
}

StainStats stain_stats_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    StainStats s;
    s.mean = {j.at("l_mean").get<double>(), j.at("alpha_mean").get<double>(), j.at("beta_mean").get<double>()};
    s.stddev = {j.at("l_std").get<double>(), j.at("alpha_std").get<double>(), j.at("beta_std").get<double>()};
    for (double v : s.stddev)
        if (!(v > 0)) throw Error("stain stats: std must be positive");
    return s;
}

DatasetManifest assign_splits(const DatasetManifest& manifest, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw Error("split ratio must lie in (0,1)");
    std::vector<std::string> slides;
    {
        std::set<std::string> uniq;
        for (const auto& r : manifest.rows) uniq.insert(r.slide_id());
        slides.assign(uniq.begin(), uniq.end());
    }
    if (slides.size() < 2) throw Error("split_dataset: need at least 2 slides, got " + std::to_string(slides.size()));
    std::mt19937_64 rng(seed);
    std::shuffle(slides.begin(), slides.end(), rng);
    const int n = static_cast<int>(slides.size());
    const int n_train = std::clamp(static_cast<int>(std::floor(ratio * n + 1e-9)), 1, n - 1);
    std::set<std::string> train(slides.begin(), slides.begin() + n_train);
    DatasetManifest out = manifest;
    for (auto& r : out.rows) r.split = train.count(r.slide_id()) ? "train" : "val";
    return out;
}

std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest, double ratio,
                                                          std::uint64_t seed) {
    const DatasetManifest all = assign_splits(manifest, ratio, seed);
    DatasetManifest train, val;
    train.root = val.root = manifest.root;
    for (const auto& r : all.rows) (r.split == "train" ? train : val).rows.push_back(r);
    return {train, val};
}

}  // namespace vipastain::patchio
