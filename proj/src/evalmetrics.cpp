#include "vipastain/evalmetrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include <json.hpp>

#include "vipastain/error.hpp"
#include "vipastain/nn.hpp"

namespace vipastain::eval {

MatchResult& MatchResult::operator+=(const MatchResult& o) {
    true_positives += o.true_positives;
    false_positives += o.false_positives;
    false_negatives += o.false_negatives;
    pairs.insert(pairs.end(), o.pairs.begin(), o.pairs.end());
    return *this;
}

MatchResult match_detections(const std::vector<detect::Detection>& preds, const std::vector<Box>& gts,
                             double iou_threshold) {
    std::vector<int> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
        const auto &a = preds[static_cast<std::size_t>(i)], &b = preds[static_cast<std::size_t>(j)];
        if (a.score != b.score) return a.score > b.score;
        if (a.box.x != b.box.x) return a.box.x < b.box.x;
        if (a.box.y != b.box.y) return a.box.y < b.box.y;
        if (a.box.w != b.box.w) return a.box.w < b.box.w;
        return a.box.h < b.box.h;
    });
    std::vector<bool> taken(gts.size(), false);
    MatchResult r;
    for (int p : order) {
        int best = -1;
        double best_iou = 0;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g]) continue;
            const double v = detect::iou(preds[static_cast<std::size_t>(p)].box, gts[g]);
            if (v >= iou_threshold && (best < 0 || v > best_iou)) {
                best = static_cast<int>(g);
                best_iou = v;
            }
        }
        if (best >= 0) {
            taken[static_cast<std::size_t>(best)] = true;
            ++r.true_positives;
            r.pairs.push_back({p, best, best_iou});
        } else {
            ++r.false_positives;
        }
    }
    r.false_negatives = static_cast<int>(gts.size()) - r.true_positives;
    return r;
}

PrecisionRecall precision_recall(std::size_t hits, std::size_t predicted, std::size_t actual) {
    PrecisionRecall pr;
    if (predicted == 0) pr.precision_flagged = true;
    else pr.precision = static_cast<double>(hits) / static_cast<double>(predicted);
    if (actual == 0) pr.recall_flagged = true;
    else pr.recall = static_cast<double>(hits) / static_cast<double>(actual);
    return pr;
}

PrecisionRecall precision_recall(const MatchResult& m) {
    return precision_recall(static_cast<std::size_t>(m.true_positives),
                            static_cast<std::size_t>(m.true_positives + m.false_positives),
                            static_cast<std::size_t>(m.true_positives + m.false_negatives));
}

double f1_score(double p, double r) { return (p + r) > 0 ? 2.0 * p * r / (p + r) : 0.0; }

PrecisionRecall mask_precision_recall(const Mask& pred, const Mask& gt) {
    if (pred.width != gt.width || pred.height != gt.height)
        throw Error("mask_precision_recall: dimension mismatch");
    std::size_t both = 0, np = 0, ng = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
        both += p && g;
        np += p;
        ng += g;
    }
    return precision_recall(both, np, ng);
}

FeatureExtractor random_conv_extractor(std::uint64_t seed, int dim) {
    if (dim < 4) throw Error("random_conv_extractor: dim must be >= 4");
    std::mt19937_64 rng(seed);
    auto c1 = std::make_shared<nn::Conv2d>(3, dim / 4, 3, 2, 1, rng);
    auto c2 = std::make_shared<nn::Conv2d>(dim / 4, dim / 2, 3, 2, 1, rng);
    auto c3 = std::make_shared<nn::Conv2d>(dim / 2, dim, 3, 2, 1, rng);
    FeatureExtractor fx;
    fx.id = "random-conv-" + std::to_string(dim) + "-" + std::to_string(seed);
    fx.embed = [c1, c2, c3, dim](const Image& img) {
        if (img.channels != 3) throw Error("feature extractor expects RGB images");
        nn::Tensor t(nn::Shape{1, 3, img.height, img.width});
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < img.height; ++y)
                for (int x = 0; x < img.width; ++x) t.at(0, c, y, x) = img.at(x, y, c) / 127.5 - 1.0;
        const nn::Var h = (*c3)(nn::relu((*c2)(nn::relu((*c1)(nn::constant(std::move(t)))))));
        const nn::Tensor& v = h.value();
        std::vector<double> f(static_cast<std::size_t>(dim), 0.0);
        const double plane = static_cast<double>(v.shape.h) * v.shape.w;
        for (int c = 0; c < dim; ++c) {
            double s = 0;
            for (int y = 0; y < v.shape.h; ++y)
                for (int x = 0; x < v.shape.w; ++x) s += std::max(0.0, v.at(0, c, y, x));
            f[static_cast<std::size_t>(c)] = s / plane;
        }
        return f;
    };
    return fx;
}

FeatureSet extract_features(const std::vector<Image>& images, const FeatureExtractor& extractor) {
    if (images.size() < 2) throw Error("extract_features: need at least 2 images");
    FeatureSet fs;
    fs.extractor = extractor.id;
    for (const auto& im : images) {
        fs.rows.push_back(extractor.embed(im));
        if (fs.dim == 0) fs.dim = static_cast<int>(fs.rows.back().size());
        if (static_cast<int>(fs.rows.back().size()) != fs.dim) throw Error("extractor returned inconsistent dimensions");
    }
    return fs;
}

namespace {

void moments(const FeatureSet& f, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const auto n = static_cast<Eigen::Index>(f.rows.size());
    if (n < 2) throw Error("frechet_distance: need at least 2 samples per set");
    Eigen::MatrixXd x(n, f.dim);
    for (Eigen::Index i = 0; i < n; ++i)
        for (int j = 0; j < f.dim; ++j) {
            const double v = f.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            if (!std::isfinite(v)) throw Error("frechet_distance: non-finite feature");
            x(i, j) = v;
        }
    mu = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    cov = (c.transpose() * c) / static_cast<double>(n - 1);
}

// Eigenvalues of a symmetric matrix with roundoff negatives zeroed; throws
// beyond the tolerance.
Eigen::VectorXd clamped_eigenvalues(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es, const char* what) {
    if (es.info() != Eigen::Success) throw Error(std::string("frechet_distance: eigendecomposition failed for ") + what);
    Eigen::VectorXd ev = es.eigenvalues();
    const double tol = 1e-6 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) < -tol) throw Error(std::string("frechet_distance: ") + what + " is not positive semidefinite");
        ev(i) = std::max(0.0, ev(i));
    }
    return ev;
}

}  // namespace

double frechet_distance(const FeatureSet& a, const FeatureSet& b) {
    if (a.dim != b.dim) throw Error("frechet_distance: feature dimensions differ");
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd s_a, s_b;
    moments(a, mu_a, s_a);
    moments(b, mu_b, s_b);
    // Tr((S_a S_b)^(1/2)) = Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)); the inner matrix is symmetric.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(s_a);
    const Eigen::VectorXd la = clamped_eigenvalues(ea, "covariance");
    const Eigen::MatrixXd root_a = ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
    Eigen::MatrixXd m = root_a * s_b * root_a;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
    const double tr_sqrt = clamped_eigenvalues(em, "covariance product").cwiseSqrt().sum();
    const double d = (mu_a - mu_b).squaredNorm() + s_a.trace() + s_b.trace() - 2.0 * tr_sqrt;
    if (!std::isfinite(d)) throw Error("frechet_distance: non-finite result");
    return std::max(0.0, d);
}

DetectionReport evaluate_detections(const std::vector<detect::Detection>& preds,
                                    const std::vector<GroundTruthPatch>& gts, double iou_threshold) {
    std::map<std::string, std::vector<detect::Detection>> by_id;
    for (const auto& p : preds) by_id[p.image_id].push_back(p);
    DetectionReport rep;
    std::size_t both = 0, np = 0, ng = 0;
    for (const auto& g : gts) {
        auto it = by_id.find(g.id);
        static const std::vector<detect::Detection> none;
        const auto& ps = it == by_id.end() ? none : it->second;
        rep.match += match_detections(ps, g.boxes, iou_threshold);

        auto paint = [&](Mask& m, const Box& b) {
            const int x0 = std::max(0, static_cast<int>(std::round(b.x)));
            const int y0 = std::max(0, static_cast<int>(std::round(b.y)));
            const int x1 = std::min(m.width, static_cast<int>(std::round(b.x + b.w)));
            const int y1 = std::min(m.height, static_cast<int>(std::round(b.y + b.h)));
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) m.at(x, y) = 1;
        };
        Mask gm = g.mask ? *g.mask : Mask(g.width, g.height);
        if (!g.mask)
            for (const auto& b : g.boxes) paint(gm, b);
        Mask pm(gm.width, gm.height);
        for (const auto& p : ps) {
            if (p.instance_mask && p.instance_mask->width == pm.width && p.instance_mask->height == pm.height)
                pm = mask_or(pm, *p.instance_mask);
            else
                paint(pm, p.box);
        }
        for (std::size_t i = 0; i < pm.data.size(); ++i) {
            both += pm.data[i] && gm.data[i];
            np += pm.data[i] != 0;
            ng += gm.data[i] != 0;
        }
    }
    rep.box = precision_recall(rep.match);
    rep.f1_box = f1_score(rep.box.precision, rep.box.recall);
    rep.mask = precision_recall(both, np, ng);
    return rep;
}

std::string report_to_json(const DetectionReport& r) {
    nlohmann::ordered_json j;
    j["p_box"] = r.box.precision;
    j["r_box"] = r.box.recall;
    j["f1_box"] = r.f1_box;
    j["p_mask"] = r.mask.precision;
    j["r_mask"] = r.mask.recall;
    j["fid"] = r.fid ? nlohmann::ordered_json(*r.fid) : nlohmann::ordered_json(nullptr);
    j["tp"] = r.match.true_positives;
    j["fp"] = r.match.false_positives;
    j["fn"] = r.match.false_negatives;
    auto flags = nlohmann::ordered_json::array();
    if (r.box.precision_flagged) flags.push_back("p_box_zero_denominator");
    if (r.box.recall_flagged) flags.push_back("r_box_zero_denominator");
    if (r.mask.precision_flagged) flags.push_back("p_mask_zero_denominator");
    if (r.mask.recall_flagged) flags.push_back("r_mask_zero_denominator");
    j["flags"] = flags;
    return j.dump(2);
}

}  // namespace vipastain::eval
