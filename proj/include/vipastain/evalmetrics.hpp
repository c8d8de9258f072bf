#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vipastain/detect.hpp"
#include "vipastain/image.hpp"

namespace vipastain::eval {

struct MatchPair {
    int pred_id = 0;
    int gt_id = 0;
    double iou = 0;
};

struct MatchResult {
    int true_positives = 0;
    int false_positives = 0;
    int false_negatives = 0;
    std::vector<MatchPair> pairs;

    MatchResult& operator+=(const MatchResult& o);
};

// Predictions in descending score order (ties by box x, y, w, h) each take the
// unmatched ground truth of highest IoU >= threshold (ties: lower gt index).
MatchResult match_detections(const std::vector<detect::Detection>& preds, const std::vector<Box>& gts,
                             double iou_threshold);

struct PrecisionRecall {
    double precision = 0;
    double recall = 0;
    bool precision_flagged = false;  // zero denominator
    bool recall_flagged = false;
};

PrecisionRecall precision_recall(const MatchResult& m);
PrecisionRecall precision_recall(std::size_t hits, std::size_t predicted, std::size_t actual);
double f1_score(double precision, double recall);

PrecisionRecall mask_precision_recall(const Mask& pred, const Mask& gt);

struct FeatureSet {
    std::string extractor;
    int dim = 0;
    std::vector<std::vector<double>> rows;
};

struct FeatureExtractor {
    std::string id;
    std::function<std::vector<double>(const Image&)> embed;
};

// Fixed-seed random-weight conv embedder; global average pooled, d = 64.
FeatureExtractor random_conv_extractor(std::uint64_t seed = 0x5eed, int dim = 64);

FeatureSet extract_features(const std::vector<Image>& images, const FeatureExtractor& extractor);

// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), unbiased covariances.
double frechet_distance(const FeatureSet& a, const FeatureSet& b);

// Box and mask metrics over a set of patches. Predictions and ground truth
// are matched per image id.
struct DetectionReport {
    MatchResult match;
    PrecisionRecall box;
    double f1_box = 0;
    PrecisionRecall mask;
    std::optional<double> fid;
};

struct GroundTruthPatch {
    std::string id;
    std::vector<Box> boxes;
    std::optional<Mask> mask;  // union of instance masks; boxes are used when absent
    int width = 0;
    int height = 0;
};

DetectionReport evaluate_detections(const std::vector<detect::Detection>& preds,
                                    const std::vector<GroundTruthPatch>& gts, double iou_threshold);

// {"p_box","r_box","f1_box","p_mask","r_mask","fid","flags":[...]}
std::string report_to_json(const DetectionReport& r);

}  // namespace vipastain::eval
