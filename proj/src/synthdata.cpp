#include "vipastain/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "vipastain/error.hpp"
#include "vipastain/png_io.hpp"

namespace vipastain::synth {

bool Palette::all_distinct() const {
    const Rgb all[] = {eosin_background, hematoxylin_core, hematoxylin_rim, red_blood_cell, ihc_background,
                       counterstain_core, counterstain_rim, dab_core, dab_rim};
    for (std::size_t i = 0; i < std::size(all); ++i)
        for (std::size_t j = i + 1; j < std::size(all); ++j)
            if (all[i] == all[j]) return false;
    return true;
}

void SceneSpec::validate() const {
    if (canvas_size < 64) throw UsageError("canvas_size must be >= 64");
    if (nucleus_count < 0 || rbc_blob_count < 0 || tls_cluster_count < 0)
        throw UsageError("object counts must be non-negative");
    if (nucleus_radius_min <= 0 || nucleus_radius_max < nucleus_radius_min)
        throw UsageError("invalid nucleus radius range");
    if (rbc_radius_min <= 0 || rbc_radius_max < rbc_radius_min) throw UsageError("invalid rbc radius range");
    if (tls_cluster_count > 0 && tls_cluster_density < 1) throw UsageError("tls_cluster_density must be >= 1");
    if (decoy_cluster_count < 0 || decoy_cluster_density < 0) throw UsageError("decoy counts must be non-negative");
    if (tls_cluster_radius <= 0) throw UsageError("tls_cluster_radius must be positive");
    if (noise_sigma < 0 || noise_sigma > 255) throw UsageError("noise_sigma must lie in [0,255]");
    if (!palette.all_distinct()) throw UsageError("palette entries must be distinct");
}

namespace {

struct Ellipse {
    double cx = 0, cy = 0, a = 1, b = 1, theta = 0;

    double rho2(double px, double py) const {
        const double dx = px - cx, dy = py - cy;
        const double c = std::cos(theta), s = std::sin(theta);
        const double u = (dx * c + dy * s) / a;
        const double v = (-dx * s + dy * c) / b;
        return u * u + v * v;
    }
};

struct Cluster {
    double cx = 0, cy = 0, radius = 0, halo = 0;
};

struct Layout {
    std::vector<Ellipse> nuclei;
    std::vector<Ellipse> rbcs;
    std::vector<Cluster> clusters;
    std::vector<Cluster> decoys;
};

constexpr int kMaxAttempts = 2000;

double dist(double x0, double y0, double x1, double y1) { return std::hypot(x1 - x0, y1 - y0); }

Layout make_layout(const SceneSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    const double size = spec.canvas_size;
    Layout L;

    // Clusters (with their nuclei) lie inside the canvas; the DAB halo may be clipped.
    const double extent = spec.tls_cluster_radius + spec.nucleus_radius_max + 1.0;
    const double halo = spec.tls_cluster_radius + spec.nucleus_radius_max + spec.positive_halo;
    for (int c = 0; c < spec.tls_cluster_count; ++c) {
        bool placed = false;
        if (size - 2 * extent >= 0) {
            for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
                Cluster cl{uni(extent, size - extent), uni(extent, size - extent), spec.tls_cluster_radius, halo};
                bool ok = true;
                for (const auto& o : L.clusters)
                    if (dist(cl.cx, cl.cy, o.cx, o.cy) <= cl.halo + o.halo + 2.0) ok = false;
                if (ok) {
                    L.clusters.push_back(cl);
                    placed = true;
                }
            }
        }
        if (!placed) throw PlacementError("cannot place TLS cluster " + std::to_string(c));
    }

    // Decoy aggregates sit outside every DAB halo.
    for (int c = 0; c < spec.decoy_cluster_count; ++c) {
        bool placed = false;
        if (size - 2 * extent >= 0) {
            for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
                Cluster d{uni(extent, size - extent), uni(extent, size - extent), spec.tls_cluster_radius, extent};
                bool ok = true;
                for (const auto& o : L.clusters)
                    if (dist(d.cx, d.cy, o.cx, o.cy) <= o.halo + extent + 1.0) ok = false;
                for (const auto& o : L.decoys)
                    if (dist(d.cx, d.cy, o.cx, o.cy) <= 2 * extent + 2.0) ok = false;
                if (ok) {
                    L.decoys.push_back(d);
                    placed = true;
                }
            }
        }
        if (!placed) throw PlacementError("cannot place decoy aggregate " + std::to_string(c));
    }

    auto random_ellipse = [&](double cx, double cy, double rmin, double rmax) {
        Ellipse e;
        e.cx = cx;
        e.cy = cy;
        e.a = uni(rmin, rmax);
        e.b = e.a * uni(0.75, 1.0);
        e.theta = uni(0.0, std::numbers::pi);
        return e;
    };

    const std::size_t n_groups = L.clusters.size() + L.decoys.size();
    for (std::size_t c = 0; c < n_groups; ++c) {
        const bool decoy = c >= L.clusters.size();
        const auto& cl = decoy ? L.decoys[c - L.clusters.size()] : L.clusters[c];
        const std::size_t first = L.nuclei.size();
        const int count = decoy ? spec.decoy_cluster_density : spec.tls_cluster_density;
        for (int k = 0; k < count; ++k) {
            bool placed = false;
            for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
                // one pixel inside the rim so every centre falls in the rasterised disc
                const double r = std::max(0.0, cl.radius - 1.0) * std::sqrt(uni(0.0, 1.0));
                const double t = uni(0.0, 2 * std::numbers::pi);
                const double x = cl.cx + r * std::cos(t), y = cl.cy + r * std::sin(t);
                bool ok = true;
                for (std::size_t i = first; i < L.nuclei.size() && ok; ++i)
                    if (dist(x, y, L.nuclei[i].cx, L.nuclei[i].cy) < 1.2 * spec.nucleus_radius_min) ok = false;
                if (ok) {
                    L.nuclei.push_back(random_ellipse(x, y, spec.nucleus_radius_min, spec.nucleus_radius_max));
                    placed = true;
                }
            }
            if (!placed)
                throw PlacementError("cannot place nucleus " + std::to_string(k) + " of " +
                                     (decoy ? "decoy aggregate " + std::to_string(c - L.clusters.size())
                                            : "TLS cluster " + std::to_string(c)));
        }
    }

    auto clear_of_clusters = [&](double x, double y, double r) {
        for (const auto* group : {&L.clusters, &L.decoys})
            for (const auto& cl : *group)
                if (dist(x, y, cl.cx, cl.cy) < extent + r + 1.0) return false;
        return true;
    };

    for (int k = 0; k < spec.nucleus_count; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
            Ellipse e = random_ellipse(0, 0, spec.nucleus_radius_min, spec.nucleus_radius_max);
            e.cx = uni(e.a, size - e.a);
            e.cy = uni(e.a, size - e.a);
            bool ok = clear_of_clusters(e.cx, e.cy, e.a);
            for (std::size_t i = 0; i < L.nuclei.size() && ok; ++i)
                if (dist(e.cx, e.cy, L.nuclei[i].cx, L.nuclei[i].cy) < e.a + L.nuclei[i].a + 0.5) ok = false;
            if (ok) {
                L.nuclei.push_back(e);
                placed = true;
            }
        }
        if (!placed) throw PlacementError("cannot place scattered nucleus " + std::to_string(k));
    }

    for (int k = 0; k < spec.rbc_blob_count; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
            Ellipse e = random_ellipse(0, 0, spec.rbc_radius_min, spec.rbc_radius_max);
            e.cx = uni(e.a, size - e.a);
            e.cy = uni(e.a, size - e.a);
            bool ok = clear_of_clusters(e.cx, e.cy, e.a);
            for (const auto& n : L.nuclei)
                if (ok && dist(e.cx, e.cy, n.cx, n.cy) < e.a + n.a + 1.5) ok = false;
            for (const auto& o : L.rbcs)
                if (ok && dist(e.cx, e.cy, o.cx, o.cy) < e.a + o.a + 0.5) ok = false;
            if (ok) {
                L.rbcs.push_back(e);
                placed = true;
            }
        }
        if (!placed) throw PlacementError("cannot place red blood cell " + std::to_string(k));
    }
    return L;
}

using Canvas = std::vector<double>;  // interleaved RGB floats

void fill(Canvas& cv, Rgb c) {
    for (std::size_t i = 0; i < cv.size(); i += 3) {
        cv[i] = c.r;
        cv[i + 1] = c.g;
        cv[i + 2] = c.b;
    }
}

// Paints `e` with a core->rim falloff; returns covered pixels into `mask`.
void paint(Canvas& cv, Mask& mask, int size, const Ellipse& e, Rgb core, Rgb rim, double falloff) {
    const int x0 = std::max(0, static_cast<int>(std::floor(e.cx - e.a - 1)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(e.cx + e.a + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(e.cy - e.a - 1)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(e.cy + e.a + 1)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double r2 = e.rho2(x + 0.5, y + 0.5);
            if (r2 > 1.0) continue;
            const double w = std::exp(-falloff * r2);
            double* px = &cv[(static_cast<std::size_t>(y) * size + x) * 3];
            px[0] = rim.r + (core.r - rim.r) * w;
            px[1] = rim.g + (core.g - rim.g) * w;
            px[2] = rim.b + (core.b - rim.b) * w;
            mask.at(x, y) = 1;
        }
    }
}

Image finish(const Canvas& cv, int size, double sigma, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    Image img(size, size, 3);
    for (std::size_t i = 0; i < cv.size(); ++i) {
        const double v = cv[i] + (sigma > 0 ? noise(rng) : 0.0);
        img.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
    return img;
}

Mask disc_mask(int size, double cx, double cy, double r) {
    Mask m(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            if (dist(x + 0.5, y + 0.5, cx, cy) <= r) m.at(x, y) = 1;
    return m;
}

Box bounding_box(const Mask& m) {
    int x0 = m.width, y0 = m.height, x1 = -1, y1 = -1;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(x, y)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0) return {};
    return {double(x0), double(y0), double(x1 - x0 + 1), double(y1 - y0 + 1)};
}

GroundTruth base_truth(const SceneSpec& spec, const Layout& L) {
    const int n = spec.canvas_size;
    GroundTruth gt;
    gt.nucleus_mask = Mask(n, n);
    gt.rbc_mask = Mask(n, n);
    gt.positive_mask = Mask(n, n);
    for (const auto& cl : L.clusters) {
        auto m = disc_mask(n, cl.cx, cl.cy, cl.radius);
        gt.tls_boxes.push_back(bounding_box(m));
        gt.tls_masks.push_back(std::move(m));
    }
    for (const auto& e : L.nuclei) gt.nucleus_centroids.emplace_back(e.cx, e.cy);
    return gt;
}

constexpr std::uint64_t kNoiseSaltHe = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kNoiseSaltCd20 = 0xc2b2ae3d27d4eb4fULL;

}  // namespace

Scene generate_pseudo_he(const SceneSpec& spec) {
    const Layout L = make_layout(spec);
    const int n = spec.canvas_size;
    const auto& pal = spec.palette;
    Scene s;
    s.truth = base_truth(spec, L);
    Canvas cv(static_cast<std::size_t>(n) * n * 3);
    fill(cv, pal.eosin_background);
    for (const auto& e : L.rbcs) paint(cv, s.truth.rbc_mask, n, e, pal.red_blood_cell, pal.red_blood_cell, 0.0);
    for (const auto& e : L.nuclei)
        paint(cv, s.truth.nucleus_mask, n, e, pal.hematoxylin_core, pal.hematoxylin_rim, spec.falloff);
    // Placement keeps a margin, this only guards rasterisation corner cases.
    for (std::size_t i = 0; i < s.truth.rbc_mask.data.size(); ++i)
        if (s.truth.nucleus_mask.data[i]) s.truth.rbc_mask.data[i] = 0;
    s.patch.stain = Stain::he;
    s.patch.image = finish(cv, n, spec.noise_sigma, spec.seed ^ kNoiseSaltHe);
    return s;
}

Scene generate_pseudo_cd20(const SceneSpec& spec) {
    const Layout L = make_layout(spec);
    const int n = spec.canvas_size;
    const auto& pal = spec.palette;
    Scene s;
    s.truth = base_truth(spec, L);
    Canvas cv(static_cast<std::size_t>(n) * n * 3);
    fill(cv, pal.ihc_background);
    for (const auto& cl : L.clusters) {
        const Ellipse disc{cl.cx, cl.cy, cl.halo, cl.halo, 0.0};
        paint(cv, s.truth.positive_mask, n, disc, pal.dab_core, pal.dab_rim, spec.falloff);
    }
    for (const auto& e : L.nuclei)
        paint(cv, s.truth.nucleus_mask, n, e, pal.counterstain_core, pal.counterstain_rim, spec.falloff);
    s.patch.stain = Stain::cd20;
    s.patch.image = finish(cv, n, spec.noise_sigma, spec.seed ^ kNoiseSaltCd20);
    return s;
}

std::uint64_t derive_seed(std::uint64_t template_seed, Stain stain, int index) {
    // splitmix64 over (seed, stain, index)
    std::uint64_t z = template_seed * 0x100000001b3ULL + static_cast<std::uint64_t>(stain) * 0x9e3779b97f4a7c15ULL +
                      static_cast<std::uint64_t>(index) + 1;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

SceneSpec corpus_scene_spec(const SceneSpec& spec_template, Stain seed_stain, int index, double tls_fraction) {
    SceneSpec spec = spec_template;
    spec.seed = derive_seed(spec_template.seed, seed_stain, index);
    // TLS presence drawn from the patch seed so both stains agree when paired.
    std::mt19937_64 pick(spec.seed ^ 0x5851f42d4c957f2dULL);
    if (std::uniform_real_distribution<double>(0.0, 1.0)(pick) >= tls_fraction)
        spec.tls_cluster_count = 0;
    else
        spec.decoy_cluster_count = 0;
    return spec;
}

DatasetManifest generate_corpus(const SceneSpec& spec_template, int count, const std::filesystem::path& out_dir,
                                const CorpusOptions& options) {
    if (count < 1) throw UsageError("corpus count must be >= 1");
    if (options.slides < 1) throw UsageError("corpus needs at least one slide");
    spec_template.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

    DatasetManifest manifest;
    manifest.root = out_dir;
    std::vector<Annotation> annotations;
    const int size = spec_template.canvas_size;

    for (Stain stain : options.stains) {
        if (stain != Stain::he && stain != Stain::cd20) throw UsageError("corpus stains must be he or cd20");
        const std::string tag = to_string(stain);
        for (int i = 0; i < count; ++i) {
            const SceneSpec spec = corpus_scene_spec(spec_template, options.paired_layouts ? Stain::he : stain, i,
                                                     options.tls_fraction);
            Scene scene = stain == Stain::he ? generate_pseudo_he(spec) : generate_pseudo_cd20(spec);

            const int slide = i % options.slides;
            const int k = i / options.slides;
            const int gx = k % 16, gy = k / 16;
            const std::string slide_id = tag + "s" + std::to_string(slide);
            const std::string patch_id =
                slide_id + "_x" + std::to_string(gx * size) + "_y" + std::to_string(gy * size);

            ManifestRow row;
            row.patch_id = patch_id;
            row.stain = stain;
            row.image_path = "images/" + patch_id + ".png";
            write_png(out_dir / row.image_path, scene.patch.image);
            const std::pair<const char*, const Mask*> masks[] = {
                {"nucleus", &scene.truth.nucleus_mask},
                {"rbc", &scene.truth.rbc_mask},
                {"positive", &scene.truth.positive_mask},
            };
            for (const auto& [kind, m] : masks) {
                const std::string rel = "masks/" + patch_id + "_gt_" + kind + ".png";
                write_png(out_dir / rel, mask_to_image(*m));
                row.mask_paths.push_back(rel);
            }
            Mask tls(size, size);
            for (const auto& tm : scene.truth.tls_masks) tls = mask_or(tls, tm);
            const std::string tls_rel = "masks/" + patch_id + "_gt_tls.png";
            write_png(out_dir / tls_rel, mask_to_image(tls));
            row.mask_paths.push_back(tls_rel);
            row.annotation_path = "annotations.jsonl";
            annotations.push_back({patch_id, scene.truth.tls_boxes});
            manifest.rows.push_back(std::move(row));
        }
    }
    write_annotations(out_dir / "annotations.jsonl", annotations);
    write_manifest(out_dir / "manifest.csv", manifest);
    return manifest;
}

}  // namespace vipastain::synth
