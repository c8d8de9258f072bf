#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <sstream>

#include "vipastain/cli.hpp"
#include "vipastain/detect.hpp"
#include "vipastain/error.hpp"
#include "vipastain/evalmetrics.hpp"
#include "vipastain/maskextract.hpp"
#include "vipastain/patchio.hpp"
#include "vipastain/synthdata.hpp"

namespace py = pybind11;
using namespace vipastain;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

// HxW or HxWxC uint8 -> Image
Image to_image(const U8Array& a) {
    if (a.ndim() != 2 && a.ndim() != 3) throw py::value_error("expected an HxW or HxWxC uint8 array");
    const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
    const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
    Image img(w, h, c);
    std::memcpy(img.data.data(), a.data(), img.data.size());
    return img;
}

py::array_t<std::uint8_t> from_image(const Image& img) {
    std::vector<py::ssize_t> shape{img.height, img.width};
    if (img.channels != 1) shape.push_back(img.channels);
    py::array_t<std::uint8_t> out(shape);
    std::memcpy(out.mutable_data(), img.data.data(), img.data.size());
    return out;
}

py::array_t<std::uint8_t> from_mask(const Mask& m) {
    py::array_t<std::uint8_t> out({m.height, m.width});
    std::memcpy(out.mutable_data(), m.data.data(), m.data.size());
    return out;
}

Mask to_mask(const U8Array& a) {
    if (a.ndim() != 2) throw py::value_error("expected an HxW mask");
    Mask m(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
    const auto* p = a.data();
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = p[i] ? 1 : 0;
    return m;
}

py::tuple box_tuple(const Box& b) { return py::make_tuple(b.x, b.y, b.w, b.h); }

Box to_box(const std::array<double, 4>& t) { return {t[0], t[1], t[2], t[3]}; }

py::dict scene_dict(const synth::Scene& s) {
    py::dict d;
    d["image"] = from_image(s.patch.image);
    d["nucleus_mask"] = from_mask(s.truth.nucleus_mask);
    d["rbc_mask"] = from_mask(s.truth.rbc_mask);
    d["positive_mask"] = from_mask(s.truth.positive_mask);
    py::list boxes, masks;
    for (const auto& b : s.truth.tls_boxes) boxes.append(box_tuple(b));
    for (const auto& m : s.truth.tls_masks) masks.append(from_mask(m));
    d["tls_boxes"] = boxes;
    d["tls_masks"] = masks;
    d["nucleus_centroids"] = s.truth.nucleus_centroids;
    return d;
}

py::dict masks_dict(const masks::TissueMaskSet& ms) {
    py::dict d;
    auto put = [&](const char* key, const std::optional<Mask>& m) {
        if (m) d[key] = from_mask(*m);
        else d[key] = py::none();
    };
    put("nucleus", ms.nucleus);
    put("rbc", ms.rbc);
    put("nucleus_plus_rbc", ms.nucleus_plus_rbc);
    put("positive", ms.positive);
    d["warnings"] = ms.warnings;
    return d;
}

eval::FeatureSet feature_set(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw py::value_error("features must be an N x d array");
    eval::FeatureSet f;
    f.extractor = "python";
    f.dim = static_cast<int>(a.shape(1));
    const double* p = a.data();
    for (py::ssize_t i = 0; i < a.shape(0); ++i) f.rows.emplace_back(p + i * f.dim, p + (i + 1) * f.dim);
    return f;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "vipastain core: synthetic histology, Otsu masks, detection metrics";

    py::register_exception<Error>(m, "VipastainError", PyExc_RuntimeError);

    py::class_<synth::SceneSpec>(m, "SceneSpec")
        .def(py::init<>())
        .def_readwrite("canvas_size", &synth::SceneSpec::canvas_size)
        .def_readwrite("nucleus_count", &synth::SceneSpec::nucleus_count)
        .def_readwrite("rbc_blob_count", &synth::SceneSpec::rbc_blob_count)
        .def_readwrite("tls_cluster_count", &synth::SceneSpec::tls_cluster_count)
        .def_readwrite("tls_cluster_density", &synth::SceneSpec::tls_cluster_density)
        .def_readwrite("tls_cluster_radius", &synth::SceneSpec::tls_cluster_radius)
        .def_readwrite("decoy_cluster_count", &synth::SceneSpec::decoy_cluster_count)
        .def_readwrite("decoy_cluster_density", &synth::SceneSpec::decoy_cluster_density)
        .def_readwrite("noise_sigma", &synth::SceneSpec::noise_sigma)
        .def_readwrite("seed", &synth::SceneSpec::seed);

    m.def("generate_scene", [](const synth::SceneSpec& spec, const std::string& stain) {
        const Stain s = stain_from_string(stain);
        if (s == Stain::he) return scene_dict(synth::generate_pseudo_he(spec));
        if (s == Stain::cd20) return scene_dict(synth::generate_pseudo_cd20(spec));
        throw py::value_error("stain must be 'he' or 'cd20'");
    }, py::arg("spec"), py::arg("stain") = "he");

    m.def("multi_otsu", [](const std::vector<std::uint64_t>& hist, int k) { return masks::multi_otsu(hist, k); },
          py::arg("hist"), py::arg("k") = masks::kDefaultLevels);

    m.def("calibrate", [](const std::string& stain, const std::vector<U8Array>& patches) {
        std::vector<Image> imgs;
        for (const auto& p : patches) imgs.push_back(to_image(p));
        return masks::calibrate_domain(stain_from_string(stain), imgs);
    }, py::arg("stain"), py::arg("patches"));

    py::class_<masks::DomainThresholds>(m, "DomainThresholds")
        .def_property_readonly("blue", [](const masks::DomainThresholds& d) { return d.blue.thresholds; })
        .def_property_readonly("other", [](const masks::DomainThresholds& d) { return d.other.thresholds; })
        .def("to_json", [](const masks::DomainThresholds& d) { return masks::thresholds_to_json({d.blue, d.other}); })
        .def("extract", [](const masks::DomainThresholds& d, const U8Array& patch) {
            return masks_dict(d.extract(to_image(patch)));
        }, py::arg("patch"));

    m.def("iou", [](const std::array<double, 4>& a, const std::array<double, 4>& b) {
        return detect::iou(to_box(a), to_box(b));
    });

    // boxes: list of (x, y, w, h); returns kept indices, best score first
    m.def("nms", [](const std::vector<std::array<double, 4>>& boxes, const std::vector<double>& scores, double thr) {
        if (boxes.size() != scores.size()) throw py::value_error("boxes and scores differ in length");
        std::vector<detect::Detection> dets;
        for (std::size_t i = 0; i < boxes.size(); ++i) {
            detect::Detection d;
            d.box = to_box(boxes[i]);
            d.score = scores[i];
            d.image_id = std::to_string(i);
            dets.push_back(std::move(d));
        }
        std::vector<int> kept;
        for (const auto& d : detect::nms(std::move(dets), thr)) kept.push_back(std::stoi(d.image_id));
        return kept;
    }, py::arg("boxes"), py::arg("scores"), py::arg("iou_threshold") = 0.5);

    m.def("precision_recall", [](std::size_t hits, std::size_t predicted, std::size_t actual) {
        const auto pr = eval::precision_recall(hits, predicted, actual);
        return py::make_tuple(pr.precision, pr.recall);
    });
    m.def("f1_score", &eval::f1_score, py::arg("precision"), py::arg("recall"));
    m.def("mask_precision_recall", [](const U8Array& pred, const U8Array& gt) {
        const auto pr = eval::mask_precision_recall(to_mask(pred), to_mask(gt));
        return py::make_tuple(pr.precision, pr.recall);
    });
    m.def("frechet_distance", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
                                 const py::array_t<double, py::array::c_style | py::array::forcecast>& b) {
        return eval::frechet_distance(feature_set(a), feature_set(b));
    });

    m.def("tile_image", [](const U8Array& image, int patch_size, int overlap) {
        py::list out;
        for (const auto& t : patchio::tile_image(to_image(image), patch_size, overlap))
            out.append(py::make_tuple(t.ref.origin_x, t.ref.origin_y, from_image(t.patch.image)));
        return out;
    }, py::arg("image"), py::arg("patch_size"), py::arg("overlap"));

    // tiles: list of (origin_x, origin_y, array) as returned by tile_image
    m.def("stitch", [](const std::vector<std::tuple<int, int, U8Array>>& tiles, int width, int height) {
        std::vector<patchio::TiledPatch> ts;
        for (const auto& [x, y, a] : tiles) {
            patchio::TiledPatch t;
            t.patch.image = to_image(a);
            t.ref.origin_x = x;
            t.ref.origin_y = y;
            t.ref.size = t.patch.image.width;
            ts.push_back(std::move(t));
        }
        return from_image(patchio::stitch_patches(ts, width, height));
    }, py::arg("tiles"), py::arg("width"), py::arg("height"));

    m.def("run_cli", [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"vipastain"};
        full.insert(full.end(), args.begin(), args.end());
        std::ostringstream out, err;
        int code;
        {
            py::gil_scoped_release release;
            code = run_cli(full, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
    }, py::arg("args"));
}
