#include "vipastain/archive.hpp"

#include <cstring>
#include <fstream>

#include "vipastain/error.hpp"

namespace vipastain {

namespace {

constexpr char kMagic[8] = {'V', 'I', 'P', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated checkpoint: " + path.string());
    return v;
}

}  // namespace

void Archive::put(const std::string& name, std::string bytes) { sections_[name] = std::move(bytes); }

void Archive::put_i64(const std::string& name, std::int64_t v) {
    std::string s(sizeof v, '\0');
    std::memcpy(s.data(), &v, sizeof v);
    put(name, std::move(s));
}

void Archive::put_tensor(const std::string& name, const nn::Tensor& t) {
    std::string s(4 * sizeof(std::int32_t) + t.data.size() * sizeof(double), '\0');
    const std::int32_t dims[4] = {t.shape.n, t.shape.c, t.shape.h, t.shape.w};
    std::memcpy(s.data(), dims, sizeof dims);
    std::memcpy(s.data() + sizeof dims, t.data.data(), t.data.size() * sizeof(double));
    put(name, std::move(s));
}

const std::string& Archive::get(const std::string& name) const {
    auto it = sections_.find(name);
    if (it == sections_.end()) throw Error("checkpoint has no section '" + name + "'");
    return it->second;
}

std::int64_t Archive::get_i64(const std::string& name) const {
    const auto& s = get(name);
    if (s.size() != sizeof(std::int64_t)) throw Error("checkpoint section '" + name + "' is not an integer");
    std::int64_t v;
    std::memcpy(&v, s.data(), sizeof v);
    return v;
}

nn::Tensor Archive::get_tensor(const std::string& name) const {
    const auto& s = get(name);
    std::int32_t dims[4];
    if (s.size() < sizeof dims) throw Error("checkpoint section '" + name + "' is not a tensor");
    std::memcpy(dims, s.data(), sizeof dims);
    nn::Tensor t(nn::Shape{dims[0], dims[1], dims[2], dims[3]});
    if (s.size() != sizeof dims + t.data.size() * sizeof(double))
        throw Error("checkpoint tensor '" + name + "' has the wrong size");
    std::memcpy(t.data.data(), s.data() + sizeof dims, t.data.size() * sizeof(double));
    return t;
}

void Archive::read_into(const std::string& name, nn::Tensor& t) const {
    nn::Tensor v = get_tensor(name);
    if (!(v.shape == t.shape))
        throw Error("checkpoint tensor '" + name + "' has shape " + v.shape.str() + ", expected " + t.shape.str());
    t = std::move(v);
}

void Archive::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint: " + path.string());
    os.write(kMagic, sizeof kMagic);
    write_pod<std::uint32_t>(os, kVersion);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(sections_.size()));
    for (const auto& [name, bytes] : sections_) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint64_t>(os, bytes.size());
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

Archive Archive::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path.string());
    char magic[8];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw IoError("not a vipastain checkpoint: " + path.string());
    if (read_pod<std::uint32_t>(is, path) != kVersion) throw IoError("unsupported checkpoint version: " + path.string());
    const auto count = read_pod<std::uint32_t>(is, path);
    Archive ar;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(read_pod<std::uint32_t>(is, path), '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(name.size())))
            throw IoError("truncated checkpoint: " + path.string());
        std::string bytes(read_pod<std::uint64_t>(is, path), '\0');
        if (!is.read(bytes.data(), static_cast<std::streamsize>(bytes.size())))
            throw IoError("truncated checkpoint: " + path.string());
        ar.sections_[name] = std::move(bytes);
    }
    return ar;
}

void put_params(Archive& ar, const std::string& prefix, const std::vector<nn::Var*>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) ar.put_tensor(prefix + "/" + std::to_string(i), params[i]->value());
}

void get_params(const Archive& ar, const std::string& prefix, const std::vector<nn::Var*>& params) {
    for (std::size_t i = 0; i < params.size(); ++i)
        ar.read_into(prefix + "/" + std::to_string(i), params[i]->mutable_value());
}

void put_adam(Archive& ar, const std::string& prefix, const nn::Adam& opt) {
    ar.put_i64(prefix + "/step", opt.step);
    ar.put_i64(prefix + "/count", static_cast<std::int64_t>(opt.m.size()));
    for (std::size_t i = 0; i < opt.m.size(); ++i) {
        ar.put_tensor(prefix + "/m/" + std::to_string(i), opt.m[i]);
        ar.put_tensor(prefix + "/v/" + std::to_string(i), opt.v[i]);
    }
}

void get_adam(const Archive& ar, const std::string& prefix, nn::Adam& opt) {
    opt.step = ar.get_i64(prefix + "/step");
    const auto count = ar.get_i64(prefix + "/count");
    opt.m.clear();
    opt.v.clear();
    for (std::int64_t i = 0; i < count; ++i) {
        opt.m.push_back(ar.get_tensor(prefix + "/m/" + std::to_string(i)));
        opt.v.push_back(ar.get_tensor(prefix + "/v/" + std::to_string(i)));
    }
}

}  // namespace vipastain
