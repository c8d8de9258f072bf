#include "vipastain/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "vipastain/error.hpp"

namespace vipastain {

namespace {

struct Entry {
    const char* section;
    const char* key;
    std::function<std::string(const PipelineConfig&)> get;
    std::function<void(PipelineConfig&, const std::string&)> set;
};

std::string fmt(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
    return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

int to_int(const std::string& v) {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(x);
}

std::uint64_t to_u64(const std::string& v) {
    std::size_t pos = 0;
    const auto x = std::stoull(v, &pos, 0);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
}

double to_double(const std::string& v) {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
}

bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument(v);
}

#define INT_FIELD(sec, name, expr)                                                          \
    Entry { sec, name, [](const PipelineConfig& c) { return std::to_string(c.expr); },      \
            [](PipelineConfig& c, const std::string& v) { c.expr = to_int(v); } }
#define DBL_FIELD(sec, name, expr)                                                   \
    Entry { sec, name, [](const PipelineConfig& c) { return fmt(c.expr); },          \
            [](PipelineConfig& c, const std::string& v) { c.expr = to_double(v); } }
#define U64_FIELD(sec, name, expr)                                                          \
    Entry { sec, name, [](const PipelineConfig& c) { return std::to_string(c.expr); },      \
            [](PipelineConfig& c, const std::string& v) { c.expr = to_u64(v); } }
#define BOOL_FIELD(sec, name, expr)                                                         \
    Entry { sec, name, [](const PipelineConfig& c) { return std::string(c.expr ? "true" : "false"); }, \
            [](PipelineConfig& c, const std::string& v) { c.expr = to_bool(v); } }
#define POL_FIELD(sec, name, expr)                                                          \
    Entry { sec, name, [](const PipelineConfig& c) { return masks::to_string(c.expr); },    \
            [](PipelineConfig& c, const std::string& v) { c.expr = masks::polarity_from_string(v); } }

const std::vector<Entry>& entries() {
    static const std::vector<Entry> e = {
        U64_FIELD("run", "seed", desk.seed),

        INT_FIELD("corpus", "patch_size", desk.scene.canvas_size),
        INT_FIELD("corpus", "count", desk.corpus_count),
        INT_FIELD("corpus", "slides", desk.slides),
        DBL_FIELD("corpus", "tls_fraction", desk.tls_fraction),
        DBL_FIELD("corpus", "split_ratio", desk.split_ratio),
        INT_FIELD("corpus", "nucleus_count", desk.scene.nucleus_count),
        DBL_FIELD("corpus", "nucleus_radius_min", desk.scene.nucleus_radius_min),
        DBL_FIELD("corpus", "nucleus_radius_max", desk.scene.nucleus_radius_max),
        INT_FIELD("corpus", "rbc_blob_count", desk.scene.rbc_blob_count),
        DBL_FIELD("corpus", "rbc_radius_min", desk.scene.rbc_radius_min),
        DBL_FIELD("corpus", "rbc_radius_max", desk.scene.rbc_radius_max),
        INT_FIELD("corpus", "tls_cluster_count", desk.scene.tls_cluster_count),
        INT_FIELD("corpus", "tls_cluster_density", desk.scene.tls_cluster_density),
        DBL_FIELD("corpus", "tls_cluster_radius", desk.scene.tls_cluster_radius),
        DBL_FIELD("corpus", "positive_halo", desk.scene.positive_halo),
        INT_FIELD("corpus", "decoy_cluster_count", desk.scene.decoy_cluster_count),
        INT_FIELD("corpus", "decoy_cluster_density", desk.scene.decoy_cluster_density),
        DBL_FIELD("corpus", "falloff", desk.scene.falloff),
        DBL_FIELD("corpus", "noise_sigma", desk.scene.noise_sigma),

        Entry{"calibrate", "thresholds_path", [](const PipelineConfig& c) { return c.thresholds_path; },
              [](PipelineConfig& c, const std::string& v) { c.thresholds_path = v; }},
        INT_FIELD("calibrate", "levels", otsu_levels),
        INT_FIELD("calibrate", "working_index", working_index),
        POL_FIELD("calibrate", "polarity_he_blue", polarity_he_blue),
        POL_FIELD("calibrate", "polarity_he_red", polarity_he_red),
        POL_FIELD("calibrate", "polarity_cd20_blue", polarity_cd20_blue),
        POL_FIELD("calibrate", "polarity_cd20_green", polarity_cd20_green),
        INT_FIELD("calibrate", "min_component_px", min_component_px),
        BOOL_FIELD("calibrate", "fill_holes", fill_holes),

        INT_FIELD("transfer", "epochs", desk.transfer.epochs),
        DBL_FIELD("transfer", "lambda_cycle", desk.transfer.lambda_cycle),
        DBL_FIELD("transfer", "lambda_mask", desk.transfer.lambda_mask),
        Entry{"transfer", "mask_loss_mode",
              [](const PipelineConfig& c) { return transfer::to_string(c.desk.transfer.mask_loss_mode); },
              [](PipelineConfig& c, const std::string& v) {
                  c.desk.transfer.mask_loss_mode = transfer::mask_loss_mode_from_string(v);
              }},
        Entry{"transfer", "mask_pairing",
              [](const PipelineConfig& c) { return transfer::to_string(c.desk.transfer.mask_pairing); },
              [](PipelineConfig& c, const std::string& v) {
                  c.desk.transfer.mask_pairing = transfer::mask_pairing_from_string(v);
              }},
        DBL_FIELD("transfer", "soft_temperature", desk.transfer.soft_temperature),
        DBL_FIELD("transfer", "learning_rate", desk.transfer.learning_rate),
        INT_FIELD("transfer", "batch_size", desk.transfer.batch_size),
        U64_FIELD("transfer", "seed", desk.transfer.seed),
        INT_FIELD("transfer", "features", desk.transfer.features),
        INT_FIELD("transfer", "res_blocks", desk.transfer.res_blocks),
        INT_FIELD("transfer", "downsamples", desk.transfer.downsamples),
        BOOL_FIELD("transfer", "identity_init", desk.transfer.identity_init),

        INT_FIELD("detect", "epochs", desk.detector.epochs),
        DBL_FIELD("detect", "learning_rate", desk.detector.learning_rate),
        INT_FIELD("detect", "batch_size", desk.detector.batch_size),
        INT_FIELD("detect", "features", desk.detector.features),
        DBL_FIELD("detect", "score_threshold", desk.detector.score_threshold),
        DBL_FIELD("detect", "nms_iou", desk.detector.nms_iou),
        DBL_FIELD("detect", "box_weight", desk.detector.box_weight),
        DBL_FIELD("detect", "positive_weight", desk.detector.positive_weight),
        BOOL_FIELD("detect", "flip_augment", desk.detector.flip_augment),
        Entry{"detect", "seeds",
              [](const PipelineConfig& c) {
                  std::string s;
                  for (auto v : c.desk.detector_seeds) s += (s.empty() ? "" : ",") + std::to_string(v);
                  return s;
              },
              [](PipelineConfig& c, const std::string& v) {
                  c.desk.detector_seeds.clear();
                  std::istringstream is(v);
                  std::string tok;
                  while (std::getline(is, tok, ',')) c.desk.detector_seeds.push_back(to_u64(trim(tok)));
                  if (c.desk.detector_seeds.empty()) throw std::invalid_argument(v);
              }},

        DBL_FIELD("eval", "match_iou", desk.match_iou),
        DBL_FIELD("eval", "merge_iou", desk.merge_iou),
        INT_FIELD("eval", "fid_count", desk.fid_count),
    };
    return e;
}

}  // namespace

void PipelineConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    bool section_known = false;
    for (const auto& e : entries()) {
        if (section != e.section) continue;
        section_known = true;
        if (key != e.key) continue;
        try {
            e.set(*this, value);
        } catch (const UsageError&) {
            throw;
        } catch (const std::exception&) {
            throw UsageError("bad value '" + value + "' for [" + section + "] " + key);
        }
        return;
    }
    if (!section_known) throw UsageError("unknown config section [" + section + "]");
    throw UsageError("unknown config key '" + key + "' in section [" + section + "]");
}

PipelineConfig PipelineConfig::parse(const std::string& text, const std::string& origin) {
    PipelineConfig c;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw UsageError(where + "malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw UsageError(where + "expected key = value");
        if (section.empty()) throw UsageError(where + "key outside of any section");
        try {
            c.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const UsageError& e) {
            throw UsageError(where + e.what());
        }
    }
    return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
}

std::string PipelineConfig::resolved() const {
    std::ostringstream os;
    std::string section;
    for (const auto& e : entries()) {
        if (section != e.section) {
            if (!section.empty()) os << "\n";
            section = e.section;
            os << "[" << section << "]\n";
        }
        os << e.key << " = " << e.get(*this) << "\n";
    }
    return os.str();
}

std::string PipelineConfig::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : resolved()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace vipastain
