#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vipastain/image.hpp"
#include "vipastain/manifest.hpp"
#include "vipastain/nn.hpp"
#include "vipastain/patchio.hpp"

namespace vipastain::detect {

enum class Frame { patch, wsi };
enum class Source { he, cd20, fused };
enum class Mode { he, cd20, fused };

std::string to_string(Frame f);
std::string to_string(Source s);
std::string to_string(Mode m);
Source source_from_string(const std::string& s);
Mode mode_from_string(const std::string& s);

struct Detection {
    Box box;
    double score = 0;
    Source source = Source::he;
    Frame frame = Frame::patch;
    std::string image_id;  // patch_id in the patch frame, slide_id in the wsi frame
    std::optional<Mask> instance_mask;
};

// [he.R, he.G, he.B, cd20.R, cd20.G, cd20.B]
Image fuse_channels(const Image& he, const Image& cd20);

double iou(const Box& a, const Box& b);

// Greedy: highest score first (ties: smaller x, then y), dropping every box
// with IoU > threshold against one already kept.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

// nms over the union, separately per image_id. Frames must agree.
std::vector<Detection> merge_detections(const std::vector<Detection>& a, const std::vector<Detection>& b,
                                        double iou_threshold);

struct DetectorConfig {
    int epochs = 40;
    double learning_rate = 1e-3;
    int batch_size = 4;
    int features = 16;
    double score_threshold = 0.5;
    double nms_iou = 0.5;
    double box_weight = 2.0;
    double positive_weight = 4.0;  // objectness weight of positive cells
    bool flip_augment = true;
    std::uint64_t seed = 7;

    void validate() const;
    std::string to_text() const;
    static DetectorConfig from_text(const std::string& text);
};

// Two scales: stride 8 with a 24 px prior and stride 16 with a 48 px prior.
// Each cell predicts objectness and (dx, dy, log w/prior, log h/prior).
struct DetectorModel {
    DetectorConfig config;
    int input_channels = 3;
    Mode mode = Mode::he;
    nn::Conv2d c1, c2, c3, c3b, c4, head8, head16;

    static constexpr int kStride8 = 8, kStride16 = 16;
    static constexpr double kPrior8 = 24.0, kPrior16 = 48.0;

    DetectorModel() = default;
    DetectorModel(const DetectorConfig& config, Mode mode);
    // Raw head outputs [N,5,H/8,W/8] and [N,5,H/16,W/16].
    std::pair<nn::Var, nn::Var> forward(const nn::Var& x) const;
    std::vector<nn::Var*> params();
};

struct DetectorSample {
    std::string id;
    Image input;  // 3 or 6 channels
    std::vector<Box> boxes;
};

nn::Tensor image_to_input(const Image& img);

// Per-cell targets for one batch; exposed for tests.
struct Targets {
    nn::Tensor obj8, obj16, box8, box16, mask8, mask16, weight8, weight16;
};
Targets build_targets(const DetectorModel& m, const std::vector<const DetectorSample*>& batch, int height, int width);

nn::Var detector_loss(const DetectorModel& m, const nn::Tensor& x, const Targets& t);

struct DetectorTrainOptions {
    std::optional<std::filesystem::path> curve_csv;
    std::function<void(int epoch, double loss)> on_epoch;
};

DetectorModel train_detector(const DetectorConfig& config, const std::vector<DetectorSample>& samples, Mode mode,
                             const DetectorTrainOptions& opt = {});

// Samples for a mode from a manifest: he uses H&E rows, cd20 uses
// virtual_cd20 rows, fused pairs them by patch_id. Only `split` rows when
// split is non-empty. Without with_boxes the annotations are not consulted.
std::vector<DetectorSample> samples_from_manifest(const DatasetManifest& m, const std::vector<Annotation>& anns,
                                                  Mode mode, const std::string& split, bool with_boxes = true);

std::vector<Detection> detect_patch(const DetectorModel& model, const Image& input, const std::string& patch_id = "");

std::vector<Detection> detect_wsi(const DetectorModel& model,
                                  const std::vector<std::pair<patchio::GridPatchRef, Image>>& patches);

void save_detector(const DetectorModel& m, const std::filesystem::path& path);
DetectorModel load_detector(const std::filesystem::path& path);

// JSON lines {"patch_id"|"slide_id", "box":[x,y,w,h], "score", "source"}.
std::string detection_to_json(const Detection& d);
void write_detections(const std::filesystem::path& path, const std::vector<Detection>& dets);
std::vector<Detection> read_detections(const std::filesystem::path& path);

}  // namespace vipastain::detect
