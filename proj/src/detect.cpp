#include "vipastain/detect.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "vipastain/archive.hpp"
#include "vipastain/error.hpp"
#include "vipastain/png_io.hpp"

namespace vipastain::detect {

using nn::Var;
using json = nlohmann::json;

std::string to_string(Frame f) { return f == Frame::patch ? "patch" : "wsi"; }

std::string to_string(Source s) {
    switch (s) {
        case Source::he: return "he";
        case Source::cd20: return "cd20";
        case Source::fused: return "fused";
    }
    return "?";
}

std::string to_string(Mode m) { return to_string(static_cast<Source>(m)); }

Source source_from_string(const std::string& s) {
    if (s == "he") return Source::he;
    if (s == "cd20") return Source::cd20;
    if (s == "fused") return Source::fused;
    throw UsageError("unknown detection source '" + s + "' (expected he, cd20 or fused)");
}

Mode mode_from_string(const std::string& s) { return static_cast<Mode>(source_from_string(s)); }

Image fuse_channels(const Image& he, const Image& cd20) {
    if (he.width != cd20.width || he.height != cd20.height)
        throw Error("fuse_channels: H&E is " + std::to_string(he.width) + "x" + std::to_string(he.height) +
                    " but CD20 is " + std::to_string(cd20.width) + "x" + std::to_string(cd20.height));
    if (he.channels != 3 || cd20.channels != 3) throw Error("fuse_channels: both inputs must be RGB");
    Image out(he.width, he.height, 6);
    for (int y = 0; y < he.height; ++y)
        for (int x = 0; x < he.width; ++x)
            for (int c = 0; c < 3; ++c) {
                out.at(x, y, c) = he.at(x, y, c);
                out.at(x, y, c + 3) = cd20.at(x, y, c);
            }
    return out;
}

double iou(const Box& a, const Box& b) {
    const double iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
    const double ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0 ? inter / uni : 0.0;
}

namespace {

bool ranks_before(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x != b.box.x) return a.box.x < b.box.x;
    if (a.box.y != b.box.y) return a.box.y < b.box.y;
    if (a.box.w != b.box.w) return a.box.w < b.box.w;
    return a.box.h < b.box.h;
}

}  // namespace

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
    std::stable_sort(dets.begin(), dets.end(), ranks_before);
    std::vector<Detection> kept;
    for (auto& d : dets) {
        bool keep = true;
        for (const auto& k : kept)
            if (iou(d.box, k.box) > iou_threshold) {
                keep = false;
                break;
            }
        if (keep) kept.push_back(std::move(d));
    }
    return kept;
}

std::vector<Detection> merge_detections(const std::vector<Detection>& a, const std::vector<Detection>& b,
                                        double iou_threshold) {
    std::optional<Frame> frame;
    for (const auto* list : {&a, &b})
        for (const auto& d : *list) {
            if (frame && *frame != d.frame) throw Error("merge_detections: detections are in different frames");
            frame = d.frame;
        }
    std::map<std::string, std::vector<Detection>> groups;
    for (const auto* list : {&a, &b})
        for (const auto& d : *list) groups[d.image_id].push_back(d);
    std::vector<Detection> out;
    for (auto& [id, g] : groups) {
        auto kept = nms(std::move(g), iou_threshold);
        out.insert(out.end(), std::make_move_iterator(kept.begin()), std::make_move_iterator(kept.end()));
    }
    return out;
}

void DetectorConfig::validate() const {
    if (epochs < 1) throw UsageError("detector: epochs must be >= 1");
    if (!(learning_rate > 0)) throw UsageError("detector: learning_rate must be > 0");
    if (batch_size < 1 || features < 1) throw UsageError("detector: batch_size and features must be >= 1");
    if (!(score_threshold >= 0 && score_threshold <= 1)) throw UsageError("detector: score_threshold must be in [0,1]");
    if (!(nms_iou > 0 && nms_iou < 1)) throw UsageError("detector: nms_iou must be in (0,1)");
    if (!(box_weight >= 0) || !(positive_weight > 0)) throw UsageError("detector: bad loss weights");
}

std::string DetectorConfig::to_text() const {
    std::ostringstream os;
    os << std::setprecision(17) << "epochs=" << epochs << "\nlearning_rate=" << learning_rate
       << "\nbatch_size=" << batch_size << "\nfeatures=" << features << "\nscore_threshold=" << score_threshold
       << "\nnms_iou=" << nms_iou << "\nbox_weight=" << box_weight << "\npositive_weight=" << positive_weight
       << "\nflip_augment=" << (flip_augment ? "true" : "false") << "\nseed=" << seed << "\n";
    return os.str();
}

DetectorConfig DetectorConfig::from_text(const std::string& text) {
    DetectorConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("bad config line '" + line + "'");
        const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        if (k == "epochs") c.epochs = std::stoi(v);
        else if (k == "learning_rate") c.learning_rate = std::stod(v);
        else if (k == "batch_size") c.batch_size = std::stoi(v);
        else if (k == "features") c.features = std::stoi(v);
        else if (k == "score_threshold") c.score_threshold = std::stod(v);
        else if (k == "nms_iou") c.nms_iou = std::stod(v);
        else if (k == "box_weight") c.box_weight = std::stod(v);
        else if (k == "positive_weight") c.positive_weight = std::stod(v);
        else if (k == "flip_augment") c.flip_augment = (v == "true" || v == "1");
        else if (k == "seed") c.seed = std::stoull(v);
        else throw Error("unknown detector config key '" + k + "'");
    }
    return c;
}

DetectorModel::DetectorModel(const DetectorConfig& cfg, Mode m)
    : config(cfg), input_channels(m == Mode::fused ? 6 : 3), mode(m) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const int f = cfg.features;
    c1 = nn::Conv2d(input_channels, f, 3, 2, 1, rng);
    c2 = nn::Conv2d(f, 2 * f, 3, 2, 1, rng);
    c3 = nn::Conv2d(2 * f, 2 * f, 3, 2, 1, rng);
    c3b = nn::Conv2d(2 * f, 2 * f, 3, 1, 1, rng);
    c4 = nn::Conv2d(2 * f, 2 * f, 3, 2, 1, rng);
    head8 = nn::Conv2d(2 * f, 5, 1, 1, 0, rng, 0.1);
    head16 = nn::Conv2d(2 * f, 5, 1, 1, 0, rng, 0.1);
    // Start with low objectness everywhere.
    head8.bias.mutable_value().data[0] = -2.0;
    head16.bias.mutable_value().data[0] = -2.0;
}

std::pair<Var, Var> DetectorModel::forward(const Var& x) const {
    if (x.shape().c != input_channels)
        throw Error("detector expects " + std::to_string(input_channels) + " channels, got " +
                    std::to_string(x.shape().c));
    if (x.shape().h % kStride16 || x.shape().w % kStride16)
        throw Error("detector input sides must be multiples of 16, got " + x.shape().str());
    Var h = nn::relu(c1(x));
    h = nn::relu(c2(h));
    h = nn::relu(c3(h));
    h = nn::relu(c3b(h));
    const Var o8 = head8(h);
    const Var o16 = head16(nn::relu(c4(h)));
    return {o8, o16};
}

std::vector<Var*> DetectorModel::params() {
    std::vector<Var*> p;
    for (auto* c : {&c1, &c2, &c3, &c3b, &c4, &head8, &head16}) p.insert(p.end(), {&c->weight, &c->bias});
    return p;
}

nn::Tensor image_to_input(const Image& img) {
    nn::Tensor t(nn::Shape{1, img.channels, img.height, img.width});
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) t.at(0, c, y, x) = img.at(x, y, c) / 127.5 - 1.0;
    return t;
}

namespace {

nn::Tensor batch_to_input(const std::vector<const DetectorSample*>& batch) {
    const Image& f = batch[0]->input;
    nn::Tensor t(nn::Shape{static_cast<int>(batch.size()), f.channels, f.height, f.width});
    for (std::size_t n = 0; n < batch.size(); ++n) {
        const Image& img = batch[n]->input;
        if (img.channels != f.channels || img.width != f.width || img.height != f.height)
            throw Error("detector batch images must share shape");
        for (int c = 0; c < img.channels; ++c)
            for (int y = 0; y < img.height; ++y)
                for (int x = 0; x < img.width; ++x)
                    t.at(static_cast<int>(n), c, y, x) = img.at(x, y, c) / 127.5 - 1.0;
    }
    return t;
}

}  // namespace

Targets build_targets(const DetectorModel& m, const std::vector<const DetectorSample*>& batch, int height, int width) {
    const int n = static_cast<int>(batch.size());
    const int h8 = height / DetectorModel::kStride8, w8 = width / DetectorModel::kStride8;
    const int h16 = height / DetectorModel::kStride16, w16 = width / DetectorModel::kStride16;
    Targets t{nn::Tensor({n, 1, h8, w8}),  nn::Tensor({n, 1, h16, w16}), nn::Tensor({n, 5, h8, w8}),
              nn::Tensor({n, 5, h16, w16}), nn::Tensor({n, 5, h8, w8}),  nn::Tensor({n, 5, h16, w16}),
              nn::Tensor({n, 1, h8, w8}, 1.0), nn::Tensor({n, 1, h16, w16}, 1.0)};
    for (int i = 0; i < n; ++i)
        for (const Box& b : batch[static_cast<std::size_t>(i)]->boxes) {
            if (b.w <= 0 || b.h <= 0) continue;
            const double s = std::max(b.w, b.h);
            const bool coarse = std::abs(std::log(s / DetectorModel::kPrior16)) < std::abs(std::log(s / DetectorModel::kPrior8));
            const int stride = coarse ? DetectorModel::kStride16 : DetectorModel::kStride8;
            const double prior = coarse ? DetectorModel::kPrior16 : DetectorModel::kPrior8;
            nn::Tensor& obj = coarse ? t.obj16 : t.obj8;
            nn::Tensor& box = coarse ? t.box16 : t.box8;
            nn::Tensor& mask = coarse ? t.mask16 : t.mask8;
            nn::Tensor& weight = coarse ? t.weight16 : t.weight8;
            const double cx = b.x + b.w / 2, cy = b.y + b.h / 2;
            const int gx = std::clamp(static_cast<int>(std::floor(cx / stride)), 0, obj.shape.w - 1);
            const int gy = std::clamp(static_cast<int>(std::floor(cy / stride)), 0, obj.shape.h - 1);
            obj.at(i, 0, gy, gx) = 1.0;
            weight.at(i, 0, gy, gx) = m.config.positive_weight;
            const double tv[4] = {cx / stride - gx, cy / stride - gy, std::log(b.w / prior), std::log(b.h / prior)};
            for (int k = 0; k < 4; ++k) {
                box.at(i, k + 1, gy, gx) = tv[k];
                mask.at(i, k + 1, gy, gx) = 1.0;
            }
        }
    return t;
}

Var detector_loss(const DetectorModel& m, const nn::Tensor& x, const Targets& t) {
    auto [o8, o16] = m.forward(nn::constant(x));
    Var loss = nn::add(nn::bce_logits_mean(nn::select_channel(o8, 0), t.obj8, &t.weight8),
                       nn::bce_logits_mean(nn::select_channel(o16, 0), t.obj16, &t.weight16));
    double npos = 0;
    for (double v : t.obj8.data) npos += v;
    for (double v : t.obj16.data) npos += v;
    if (npos > 0 && m.config.box_weight > 0) {
        auto sq = [](const Var& out, const nn::Tensor& target, const nn::Tensor& mask) {
            const Var d = nn::mul(nn::sub(out, nn::constant(target)), nn::constant(mask));
            return nn::sum(nn::mul(d, d));
        };
        const Var box = nn::add(sq(o8, t.box8, t.mask8), sq(o16, t.box16, t.mask16));
        loss = nn::add(loss, nn::scale(box, m.config.box_weight / npos));
    }
    return loss;
}

namespace {

DetectorSample flipped(const DetectorSample& s, bool hflip, bool vflip) {
    if (!hflip && !vflip) return s;
    DetectorSample o;
    o.id = s.id;
    const Image& in = s.input;
    o.input = Image(in.width, in.height, in.channels);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x) {
            const int sx = hflip ? in.width - 1 - x : x, sy = vflip ? in.height - 1 - y : y;
            for (int c = 0; c < in.channels; ++c) o.input.at(x, y, c) = in.at(sx, sy, c);
        }
    for (Box b : s.boxes) {
        if (hflip) b.x = in.width - b.x - b.w;
        if (vflip) b.y = in.height - b.y - b.h;
        o.boxes.push_back(b);
    }
    return o;
}

}  // namespace

DetectorModel train_detector(const DetectorConfig& config, const std::vector<DetectorSample>& samples, Mode mode,
                             const DetectorTrainOptions& opt) {
    config.validate();
    if (samples.empty()) throw Error("train_detector: no training samples");
    DetectorModel model(config, mode);
    for (const auto& s : samples)
        if (s.input.channels != model.input_channels)
            throw Error("train_detector: sample " + s.id + " has " + std::to_string(s.input.channels) +
                        " channels, mode " + to_string(mode) + " needs " + std::to_string(model.input_channels));
    const int height = samples[0].input.height, width = samples[0].input.width;

    std::ofstream csv;
    if (opt.curve_csv) {
        if (opt.curve_csv->has_parent_path()) std::filesystem::create_directories(opt.curve_csv->parent_path());
        csv.open(*opt.curve_csv);
        if (!csv) throw IoError("cannot write training curve: " + opt.curve_csv->string());
        csv << "epoch,loss\n" << std::setprecision(10);
    }

    nn::Adam adam;
    adam.lr = config.learning_rate;
    adam.beta1 = 0.9;
    auto params = model.params();
    std::vector<std::size_t> order(samples.size());
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(config.seed ^ (0xd1b54a32d192ed03ULL * static_cast<std::uint64_t>(epoch + 1)));
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0;
        int batches = 0;
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
            std::vector<DetectorSample> aug;
            for (std::size_t i = s; i < std::min(order.size(), s + config.batch_size); ++i) {
                const bool h = config.flip_augment && (rng() & 1), v = config.flip_augment && (rng() & 1);
                aug.push_back(flipped(samples[order[i]], h, v));
            }
            std::vector<const DetectorSample*> batch;
            for (const auto& a : aug) batch.push_back(&a);
            for (auto* p : params) p->zero_grad();
            const Var loss = detector_loss(model, batch_to_input(batch), build_targets(model, batch, height, width));
            if (!std::isfinite(loss.item()))
                throw Error("train_detector: non-finite loss at epoch " + std::to_string(epoch + 1));
            nn::backward(loss);
            adam.update(params);
            total += loss.item();
            ++batches;
        }
        for (auto* p : params) p->zero_grad();
        if (csv.is_open()) csv << epoch + 1 << "," << total / batches << "\n";
        if (opt.on_epoch) opt.on_epoch(epoch + 1, total / batches);
    }
    return model;
}

std::vector<DetectorSample> samples_from_manifest(const DatasetManifest& m, const std::vector<Annotation>& anns,
                                                  Mode mode, const std::string& split, bool with_boxes) {
    std::map<std::string, const Annotation*> by_id;
    for (const auto& a : anns) by_id[a.patch_id] = &a;
    auto boxes_of = [&](const std::string& id) -> std::vector<Box> {
        if (!with_boxes) return {};
        auto it = by_id.find(id);
        if (it == by_id.end()) throw Error("no annotation for patch " + id);
        return it->second->boxes;
    };
    std::vector<DetectorSample> out;
    if (mode != Mode::fused) {
        const Stain want = mode == Mode::he ? Stain::he : Stain::virtual_cd20;
        for (const auto* r : m.by_stain(want)) {
            if (!split.empty() && r->split != split) continue;
            out.push_back({r->patch_id, read_png(m.resolve(r->image_path)), boxes_of(r->patch_id)});
        }
        if (out.empty())
            throw Error("manifest has no " + to_string(want) + " rows" + (split.empty() ? "" : " in split " + split));
        return out;
    }
    std::vector<std::string> unpaired;
    std::vector<std::pair<const ManifestRow*, const ManifestRow*>> pairs;
    for (const auto* r : m.by_stain(Stain::he)) {
        if (!split.empty() && r->split != split) continue;
        const ManifestRow* v = m.find(r->patch_id, Stain::virtual_cd20);
        if (!v) unpaired.push_back(r->patch_id);
        else pairs.emplace_back(r, v);
    }
    if (!unpaired.empty()) {
        std::string msg = "fused mode needs a virtual CD20 pair for every H&E patch; unpaired:";
        for (const auto& id : unpaired) msg += " " + id;
        throw Error(msg);
    }
    for (const auto& [r, v] : pairs)
        out.push_back({r->patch_id,
                       fuse_channels(read_png(m.resolve(r->image_path)), read_png(m.resolve(v->image_path))),
                       boxes_of(r->patch_id)});
    if (out.empty()) throw Error("manifest has no H&E rows" + (split.empty() ? "" : " in split " + split));
    return out;
}

std::vector<Detection> detect_patch(const DetectorModel& model, const Image& input, const std::string& patch_id) {
    if (input.channels != model.input_channels)
        throw Error("detect_patch: model expects " + std::to_string(model.input_channels) + " channels, got " +
                    std::to_string(input.channels));
    auto [o8, o16] = model.forward(nn::constant(image_to_input(input)));
    std::vector<Detection> dets;
    auto decode = [&](const nn::Tensor& o, int stride, double prior) {
        for (int gy = 0; gy < o.shape.h; ++gy)
            for (int gx = 0; gx < o.shape.w; ++gx) {
                const double z = o.at(0, 0, gy, gx);
                const double score = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
                if (score < model.config.score_threshold) continue;
                const double cx = (gx + std::clamp(o.at(0, 1, gy, gx), 0.0, 1.0)) * stride;
                const double cy = (gy + std::clamp(o.at(0, 2, gy, gx), 0.0, 1.0)) * stride;
                const double w = prior * std::exp(std::clamp(o.at(0, 3, gy, gx), -4.0, 4.0));
                const double h = prior * std::exp(std::clamp(o.at(0, 4, gy, gx), -4.0, 4.0));
                const double x0 = std::max(0.0, cx - w / 2), y0 = std::max(0.0, cy - h / 2);
                const double x1 = std::min<double>(input.width, cx + w / 2), y1 = std::min<double>(input.height, cy + h / 2);
                if (x1 <= x0 || y1 <= y0) continue;
                Detection d;
                d.box = {x0, y0, x1 - x0, y1 - y0};
                d.score = score;
                d.source = static_cast<Source>(model.mode);
                d.frame = Frame::patch;
                d.image_id = patch_id;
                dets.push_back(std::move(d));
            }
    };
    decode(o8.value(), DetectorModel::kStride8, DetectorModel::kPrior8);
    decode(o16.value(), DetectorModel::kStride16, DetectorModel::kPrior16);
    dets = nms(std::move(dets), model.config.nms_iou);
    for (auto& d : dets) {
        // Box-shaped instance mask.
        Mask m(input.width, input.height);
        for (int y = static_cast<int>(std::round(d.box.y)); y < static_cast<int>(std::round(d.box.y + d.box.h)); ++y)
            for (int x = static_cast<int>(std::round(d.box.x)); x < static_cast<int>(std::round(d.box.x + d.box.w)); ++x)
                m.at(x, y) = 1;
        d.instance_mask = std::move(m);
    }
    return dets;
}

std::vector<Detection> detect_wsi(const DetectorModel& model,
                                  const std::vector<std::pair<patchio::GridPatchRef, Image>>& patches) {
    std::vector<Detection> all;
    for (const auto& [ref, img] : patches)
        for (auto& d : detect_patch(model, img, patchio::patch_file_name(ref))) {
            d.box.x += ref.origin_x;
            d.box.y += ref.origin_y;
            d.frame = Frame::wsi;
            d.image_id = ref.slide_id;
            d.instance_mask.reset();
            all.push_back(std::move(d));
        }
    std::map<std::string, std::vector<Detection>> by_slide;
    for (auto& d : all) by_slide[d.image_id].push_back(std::move(d));
    std::vector<Detection> out;
    for (auto& [id, g] : by_slide) {
        auto kept = nms(std::move(g), model.config.nms_iou);
        out.insert(out.end(), std::make_move_iterator(kept.begin()), std::make_move_iterator(kept.end()));
    }
    return out;
}

void save_detector(const DetectorModel& m, const std::filesystem::path& path) {
    Archive ar;
    ar.put_text("kind", "detector");
    ar.put_text("config", m.config.to_text());
    ar.put_text("mode", to_string(m.mode));
    put_params(ar, "params", const_cast<DetectorModel&>(m).params());
    ar.save(path);
}

DetectorModel load_detector(const std::filesystem::path& path) {
    const Archive ar = Archive::load(path);
    if (!ar.has("kind") || ar.get("kind") != "detector") throw Error("not a detector checkpoint: " + path.string());
    DetectorModel m(DetectorConfig::from_text(ar.get("config")), mode_from_string(ar.get("mode")));
    get_params(ar, "params", m.params());
    return m;
}

std::string detection_to_json(const Detection& d) {
    json j;
    j[d.frame == Frame::patch ? "patch_id" : "slide_id"] = d.image_id;
    j["box"] = {d.box.x, d.box.y, d.box.w, d.box.h};
    j["score"] = d.score;
    j["source"] = to_string(d.source);
    return j.dump();
}

void write_detections(const std::filesystem::path& path, const std::vector<Detection>& dets) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot write detections: " + path.string());
    for (const auto& d : dets) os << detection_to_json(d) << "\n";
}

std::vector<Detection> read_detections(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read detections: " + path.string());
    std::vector<Detection> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            Detection d;
            if (j.contains("slide_id")) {
                d.frame = Frame::wsi;
                d.image_id = j.at("slide_id").get<std::string>();
            } else {
                d.image_id = j.at("patch_id").get<std::string>();
            }
            const auto& b = j.at("box");
            d.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
            d.score = j.at("score").get<double>();
            d.source = source_from_string(j.value("source", std::string("he")));
            out.push_back(std::move(d));
        } catch (const json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace vipastain::detect
