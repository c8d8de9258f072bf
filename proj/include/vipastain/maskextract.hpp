#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vipastain/image.hpp"

namespace vipastain::masks {

enum class Channel { r = 0, g = 1, b = 2 };
enum class Polarity { keep_below, keep_above };

std::string to_string(Channel c);
std::string to_string(Polarity p);
Channel channel_from_string(const std::string& s);
Polarity polarity_from_string(const std::string& s);

struct ChannelHistogram {
    std::array<std::uint64_t, 256> bins{};
    std::uint64_t total = 0;

    void add(const Image& channel);
    void merge(const ChannelHistogram& other);
};

ChannelHistogram histogram_of(const Image& channel);

inline constexpr int kDefaultLevels = 7;
inline constexpr int kDefaultWorkingIndex = 5;  // second-highest of seven

struct ThresholdSet {
    Stain domain = Stain::he;
    Channel channel = Channel::b;
    std::vector<int> thresholds;
    int working_index = kDefaultWorkingIndex;
    Polarity polarity = Polarity::keep_below;

    int working_threshold() const { return thresholds.at(static_cast<std::size_t>(working_index)); }
    void validate() const;
    std::string id() const;  // e.g. "he/B@5"
};

// k thresholds maximising the between-class variance of the k+1 classes
// {v <= t1}, {t1 < v <= t2}, ..., {v > tk} over bins [0, L). Ties resolve to
// the lexicographically smallest tuple. Requires >= k+1 populated bins.
std::vector<int> multi_otsu(std::span<const std::uint64_t> hist, int k);
std::vector<int> multi_otsu(const ChannelHistogram& hist, int k = kDefaultLevels);

// Between-class variance of the partition induced by `thresholds`.
double between_class_variance(std::span<const std::uint64_t> hist, std::span<const int> thresholds);

std::array<Image, 3> split_channels(const Image& patch);
Image merge_channels(const std::array<Image, 3>& channels);

Mask extract_region(const Image& channel, const ThresholdSet& ts);

// Drops 8-connected foreground components smaller than min_component_px, then
// fills 4-connected background components that do not touch the border.
Mask clean_mask(const Mask& mask, int min_component_px, bool fill_holes);
int labelled_components(const Mask& mask, bool eight_connected);

// 16 px at 512 px, scaled by area; at least 1.
int default_min_component_px(int patch_size);

struct TissueMaskSet {
    std::optional<Mask> nucleus;            // m_n
    std::optional<Mask> rbc;                // m_r
    std::optional<Mask> nucleus_plus_rbc;   // m_{n+r}
    std::optional<Mask> positive;           // m_p
    std::vector<std::string> sources;
    std::vector<std::string> warnings;
};

struct ExtractOptions {
    int min_component_px = -1;  // <0: default_min_component_px(patch size)
    bool fill_holes = true;
    // Re-derive thresholds from the patch itself (keeps working_index and polarity).
    bool per_patch = false;
};

TissueMaskSet extract_he_masks(const Image& patch, const ThresholdSet& blue, const ThresholdSet& red,
                               const ExtractOptions& opt = {});
TissueMaskSet extract_cd20_masks(const Image& patch, const ThresholdSet& blue, const ThresholdSet& green,
                                 const ExtractOptions& opt = {});

// sigmoid((t - v) / temperature) for keep_below, mirrored for keep_above.
double soft_value(double pixel, double threshold, double temperature, Polarity polarity);
SoftMask soft_mask(const Image& channel, double threshold, double temperature,
                   Polarity polarity = Polarity::keep_below);

// Pooled-histogram calibration over a set of RGB patches.
ThresholdSet calibrate(Stain domain, Channel channel, std::span<const Image> patches,
                       Polarity polarity = Polarity::keep_below, int levels = kDefaultLevels,
                       int working_index = kDefaultWorkingIndex);

// Channel rules per stain: H&E -> {B: nucleus, R: nucleus+rbc}; CD20 -> {B: nucleus, G: positive}.
struct DomainThresholds {
    Stain domain = Stain::he;
    ThresholdSet blue;
    ThresholdSet other;  // red for H&E, green for CD20

    TissueMaskSet extract(const Image& patch, const ExtractOptions& opt = {}) const;
};

DomainThresholds calibrate_domain(Stain domain, std::span<const Image> patches);

std::string thresholds_to_json(const std::vector<ThresholdSet>& sets);
std::vector<ThresholdSet> thresholds_from_json(const std::string& text);
DomainThresholds domain_from_sets(Stain domain, const std::vector<ThresholdSet>& sets);

}  // namespace vipastain::masks
