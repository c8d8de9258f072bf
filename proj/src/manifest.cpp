#include "vipastain/manifest.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "vipastain/error.hpp"

namespace vipastain {

std::string ManifestRow::slide_id() const {
    const auto pos = patch_id.rfind("_x");
    return pos == std::string::npos ? patch_id : patch_id.substr(0, pos);
}

std::vector<const ManifestRow*> DatasetManifest::by_stain(Stain s) const {
    std::vector<const ManifestRow*> out;
    for (const auto& r : rows)
        if (r.stain == s) out.push_back(&r);
    return out;
}

const ManifestRow* DatasetManifest::find(const std::string& patch_id, Stain s) const {
    for (const auto& r : rows)
        if (r.stain == s && r.patch_id == patch_id) return &r;
    return nullptr;
}

std::filesystem::path DatasetManifest::resolve(const std::string& rel) const {
    std::filesystem::path p(rel);
    return p.is_absolute() ? p : root / p;
}

namespace {

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

}  // namespace

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write manifest " + path.string());
    os << kManifestHeader << '\n';
    for (const auto& r : m.rows) {
        std::string masks;
        for (std::size_t i = 0; i < r.mask_paths.size(); ++i) {
            if (i) masks += ';';
            masks += r.mask_paths[i];
        }
        os << r.patch_id << ',' << to_string(r.stain) << ',' << r.split << ',' << r.image_path << ','
           << masks << ',' << r.annotation_path << '\n';
    }
    if (!os) throw IoError("write failed for manifest " + path.string());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read manifest " + path.string());
    DatasetManifest m;
    m.root = path.parent_path();
    std::string line;
    if (!std::getline(is, line) || line != kManifestHeader)
        throw IoError("bad manifest header in " + path.string());
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto cols = split_on(line, ',');
        if (cols.size() != 6)
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 6 columns");
        ManifestRow r;
        r.patch_id = cols[0];
        r.stain = stain_from_string(cols[1]);
        r.split = cols[2];
        r.image_path = cols[3];
        if (!cols[4].empty()) r.mask_paths = split_on(cols[4], ';');
        r.annotation_path = cols[5];
        m.rows.push_back(std::move(r));
    }
    return m;
}

void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& anns) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write annotations " + path.string());
    for (const auto& a : anns) {
        nlohmann::json boxes = nlohmann::json::array();
        for (const auto& b : a.boxes) boxes.push_back({b.x, b.y, b.w, b.h});
        nlohmann::json j;
        j["patch_id"] = a.patch_id;
        j["boxes"] = boxes;
        os << j.dump() << '\n';
    }
}

std::vector<Annotation> read_annotations(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read annotations " + path.string());
    std::vector<Annotation> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        Annotation a;
        a.patch_id = j.at("patch_id").get<std::string>();
        for (const auto& b : j.at("boxes"))
            a.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                               b.at(3).get<double>()});
        out.push_back(std::move(a));
    }
    return out;
}

}  // namespace vipastain
