#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vipastain/nn.hpp"

namespace vipastain {

// Named-section binary container used for model checkpoints.
// Layout: "VIPACKPT" u32(version) u32(count) { u32 len, name, u64 len, bytes }*
class Archive {
public:
    void put(const std::string& name, std::string bytes);
    void put_text(const std::string& name, const std::string& text) { put(name, text); }
    void put_i64(const std::string& name, std::int64_t v);
    void put_tensor(const std::string& name, const nn::Tensor& t);

    bool has(const std::string& name) const { return sections_.count(name) != 0; }
    const std::string& get(const std::string& name) const;
    std::int64_t get_i64(const std::string& name) const;
    nn::Tensor get_tensor(const std::string& name) const;
    // Reads into an existing tensor, checking the shape.
    void read_into(const std::string& name, nn::Tensor& t) const;

    void save(const std::filesystem::path& path) const;
    static Archive load(const std::filesystem::path& path);

private:
    std::map<std::string, std::string> sections_;
};

// Parameters and Adam moments go under "<prefix>/<index>".
void put_params(Archive& ar, const std::string& prefix, const std::vector<nn::Var*>& params);
void get_params(const Archive& ar, const std::string& prefix, const std::vector<nn::Var*>& params);
void put_adam(Archive& ar, const std::string& prefix, const nn::Adam& opt);
void get_adam(const Archive& ar, const std::string& prefix, nn::Adam& opt);

}  // namespace vipastain
