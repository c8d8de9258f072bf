#include "vipastain/maskextract.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>

#include "vipastain/error.hpp"

namespace vipastain::masks {

std::string to_string(Channel c) {
    switch (c) {
        case Channel::r: return "R";
        case Channel::g: return "G";
        case Channel::b: return "B";
    }
    return "B";
}

std::string to_string(Polarity p) { return p == Polarity::keep_below ? "keep-below" : "keep-above"; }

Channel channel_from_string(const std::string& s) {
    if (s == "R" || s == "r") return Channel::r;
    if (s == "G" || s == "g") return Channel::g;
    if (s == "B" || s == "b") return Channel::b;
    throw Error("unknown channel '" + s + "'");
}

Polarity polarity_from_string(const std::string& s) {
    if (s == "keep-below") return Polarity::keep_below;
    if (s == "keep-above") return Polarity::keep_above;
    throw Error("unknown polarity '" + s + "'");
}

void ChannelHistogram::add(const Image& channel) {
    if (channel.channels != 1) throw Error("histogram needs a single-channel image");
    for (auto v : channel.data) ++bins[v];
    total += channel.data.size();
}

void ChannelHistogram::merge(const ChannelHistogram& other) {
    for (std::size_t i = 0; i < bins.size(); ++i) bins[i] += other.bins[i];
    total += other.total;
}

ChannelHistogram histogram_of(const Image& channel) {
    ChannelHistogram h;
    h.add(channel);
    return h;
}

void ThresholdSet::validate() const {
    if (thresholds.empty()) throw Error("threshold set is empty");
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
        if (thresholds[i] < 0 || thresholds[i] > 255) throw Error("threshold outside [0,255]");
        if (i > 0 && thresholds[i] <= thresholds[i - 1]) throw Error("thresholds must be strictly increasing");
    }
    if (working_index < 0 || working_index >= static_cast<int>(thresholds.size()))
        throw Error("working_index out of range");
}

std::string ThresholdSet::id() const {
    return vipastain::to_string(domain) + "/" + to_string(channel) + "@" + std::to_string(working_index);
}

std::vector<int> multi_otsu(std::span<const std::uint64_t> hist, int k) {
    const int L = static_cast<int>(hist.size());
    if (k < 1 || k > 7) throw Error("multi_otsu: k must lie in [1,7]");
    const int populated = static_cast<int>(std::count_if(hist.begin(), hist.end(), [](auto c) { return c > 0; }));
    if (populated < k + 1)
        throw DegenerateHistogramError("multi_otsu: " + std::to_string(populated) + " populated bins, need " +
                                       std::to_string(k + 1));

    // Cumulative zeroth/first moments; W[i], S[i] cover bins [0, i).
    std::vector<double> W(L + 1, 0.0), S(L + 1, 0.0);
    for (int i = 0; i < L; ++i) {
        W[i + 1] = W[i] + static_cast<double>(hist[i]);
        S[i + 1] = S[i] + static_cast<double>(hist[i]) * i;
    }
    // A threshold t splits after bin t; class (a, b] spans bins a+1..b, i.e. [a+1, b+1).
    auto cost = [&](int a, int b) {
        const double w = W[b + 1] - W[a + 1];
        if (w <= 0) return 0.0;
        const double s = S[b + 1] - S[a + 1];
        return s * s / w;
    };

    // best[j][t]: best sum over classes covering (t, L-1] using j more thresholds.
    // Indexed t+1 so t = -1 is representable.
    const double neg = -std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best(k, std::vector<double>(L + 1, neg));
    for (int t = -1; t <= L - 2; ++t) best[0][t + 1] = cost(t, L - 1);
    for (int j = 1; j < k; ++j) {
        for (int t = -1; t <= L - 2 - j; ++t) {
            double b = neg;
            for (int u = t + 1; u <= L - 1 - j; ++u) b = std::max(b, cost(t, u) + best[j - 1][u + 1]);
            best[j][t + 1] = b;
        }
    }

    // Forward reconstruction choosing the smallest maximiser at every step. Tied
    // optima (mirror-symmetric histograms) differ only by rounding, hence the tolerance.
    std::vector<int> out;
    int prev = -1;
    for (int j = k - 1; j >= 0; --j) {
        const int hi = L - 2 - j;
        std::vector<double> v(static_cast<std::size_t>(std::max(0, hi - prev)), neg);
        double m = neg;
        for (int u = prev + 1; u <= hi; ++u) {
            v[u - prev - 1] = cost(prev, u) + best[j][u + 1];
            m = std::max(m, v[u - prev - 1]);
        }
        const double tol = 1e-11 * std::max(1.0, std::abs(m));
        int arg = prev + 1;
        while (v[arg - prev - 1] < m - tol) ++arg;
        out.push_back(arg);
        prev = arg;
    }
    return out;
}

std::vector<int> multi_otsu(const ChannelHistogram& hist, int k) { return multi_otsu(std::span(hist.bins), k); }

double between_class_variance(std::span<const std::uint64_t> hist, std::span<const int> thresholds) {
    double n = 0, sum = 0;
    for (std::size_t i = 0; i < hist.size(); ++i) {
        n += static_cast<double>(hist[i]);
        sum += static_cast<double>(hist[i]) * static_cast<double>(i);
    }
    if (n == 0) return 0.0;
    const double mu = sum / n;
    double var = 0;
    std::size_t lo = 0;
    for (std::size_t c = 0; c <= thresholds.size(); ++c) {
        const std::size_t hi = c < thresholds.size() ? static_cast<std::size_t>(thresholds[c]) + 1 : hist.size();
        double w = 0, s = 0;
        for (std::size_t i = lo; i < hi && i < hist.size(); ++i) {
            w += static_cast<double>(hist[i]);
            s += static_cast<double>(hist[i]) * static_cast<double>(i);
        }
        if (w > 0) {
            const double m = s / w;
            var += (w / n) * (m - mu) * (m - mu);
        }
        lo = hi;
    }
    return var;
}

std::array<Image, 3> split_channels(const Image& patch) {
    if (patch.channels != 3) throw Error("split_channels: expected an RGB patch");
    std::array<Image, 3> out{Image(patch.width, patch.height, 1), Image(patch.width, patch.height, 1),
                             Image(patch.width, patch.height, 1)};
    const std::size_t n = patch.pixel_count();
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) out[c].data[i] = patch.data[i * 3 + c];
    return out;
}

Image merge_channels(const std::array<Image, 3>& ch) {
    for (const auto& c : ch)
        if (c.channels != 1 || c.width != ch[0].width || c.height != ch[0].height)
            throw Error("merge_channels: inconsistent channel images");
    Image out(ch[0].width, ch[0].height, 3);
    const std::size_t n = out.pixel_count();
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) out.data[i * 3 + c] = ch[c].data[i];
    return out;
}

Mask extract_region(const Image& channel, const ThresholdSet& ts) {
    if (channel.channels != 1) throw Error("extract_region: expected a single channel");
    const int t = ts.working_threshold();
    Mask m(channel.width, channel.height);
    for (std::size_t i = 0; i < channel.data.size(); ++i) {
        const bool below = channel.data[i] <= t;
        m.data[i] = (ts.polarity == Polarity::keep_below) == below ? 1 : 0;
    }
    return m;
}

namespace {

// Labels pixels whose value equals `value`; returns label per pixel (0 = other) and sizes.
std::vector<int> label(const Mask& m, std::uint8_t value, bool eight, std::vector<std::size_t>& sizes,
                       std::vector<bool>* touches_border = nullptr) {
    const int w = m.width, h = m.height;
    std::vector<int> lab(m.data.size(), 0);
    std::vector<int> stack;
    sizes.assign(1, 0);
    if (touches_border) touches_border->assign(1, false);
    static constexpr int dx8[] = {1, -1, 0, 0, 1, 1, -1, -1};
    static constexpr int dy8[] = {0, 0, 1, -1, 1, -1, 1, -1};
    const int nbrs = eight ? 8 : 4;
    for (int start = 0; start < static_cast<int>(m.data.size()); ++start) {
        if ((m.data[start] != 0) != (value != 0) || lab[start]) continue;
        const int id = static_cast<int>(sizes.size());
        sizes.push_back(0);
        if (touches_border) touches_border->push_back(false);
        lab[start] = id;
        stack.push_back(start);
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            ++sizes[id];
            const int x = p % w, y = p / w;
            if (touches_border && (x == 0 || y == 0 || x == w - 1 || y == h - 1)) (*touches_border)[id] = true;
            for (int d = 0; d < nbrs; ++d) {
                const int nx = x + dx8[d], ny = y + dy8[d];
                if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                const int q = ny * w + nx;
                if (lab[q] || (m.data[q] != 0) != (value != 0)) continue;
                lab[q] = id;
                stack.push_back(q);
            }
        }
    }
    return lab;
}

}  // namespace

int labelled_components(const Mask& mask, bool eight_connected) {
    std::vector<std::size_t> sizes;
    label(mask, 1, eight_connected, sizes);
    return static_cast<int>(sizes.size()) - 1;
}

Mask clean_mask(const Mask& mask, int min_component_px, bool fill_holes) {
    if (min_component_px < 0) throw Error("min_component_px must be >= 0");
    Mask out = mask;
    for (auto& v : out.data) v = v ? 1 : 0;
    std::vector<std::size_t> sizes;
    if (min_component_px > 0) {
        const auto lab = label(out, 1, true, sizes);
        for (std::size_t i = 0; i < out.data.size(); ++i)
            if (lab[i] && sizes[lab[i]] < static_cast<std::size_t>(min_component_px)) out.data[i] = 0;
    }
    if (fill_holes) {
        std::vector<bool> border;
        const auto lab = label(out, 0, false, sizes, &border);
        for (std::size_t i = 0; i < out.data.size(); ++i)
            if (lab[i] && !border[lab[i]]) out.data[i] = 1;
    }
    return out;
}

int default_min_component_px(int patch_size) {
    const double scale = static_cast<double>(patch_size) / 512.0;
    return std::max(1, static_cast<int>(std::lround(16.0 * scale * scale)));
}

double soft_value(double pixel, double threshold, double temperature, Polarity polarity) {
    const double z = (polarity == Polarity::keep_below ? threshold - pixel : pixel - threshold) / temperature;
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

SoftMask soft_mask(const Image& channel, double threshold, double temperature, Polarity polarity) {
    if (channel.channels != 1) throw Error("soft_mask: expected a single channel");
    if (!(temperature > 0)) throw Error("soft_mask: temperature must be positive");
    SoftMask s{channel.width, channel.height, std::vector<double>(channel.data.size())};
    for (std::size_t i = 0; i < channel.data.size(); ++i)
        s.data[i] = soft_value(channel.data[i], threshold, temperature, polarity);
    return s;
}

ThresholdSet calibrate(Stain domain, Channel channel, std::span<const Image> patches, Polarity polarity,
                       int levels, int working_index) {
    if (patches.empty()) throw Error("calibrate: no patches");
    ChannelHistogram h;
    for (const auto& p : patches) h.add(split_channels(p)[static_cast<int>(channel)]);
    ThresholdSet ts;
    ts.domain = domain;
    ts.channel = channel;
    ts.thresholds = multi_otsu(h, levels);
    ts.working_index = working_index;
    ts.polarity = polarity;
    ts.validate();
    return ts;
}

namespace {

Mask extract_one(const Image& channel, const ThresholdSet& ts, const ExtractOptions& opt, int min_px,
                 TissueMaskSet& out, bool& ok) {
    ThresholdSet use = ts;
    if (opt.per_patch) {
        try {
            use.thresholds = multi_otsu(histogram_of(channel), static_cast<int>(ts.thresholds.size()));
        } catch (const DegenerateHistogramError& e) {
            out.warnings.push_back(ts.id() + ": " + e.what() + "; mask left empty");
            ok = false;
            return Mask(channel.width, channel.height);
        }
    }
    out.sources.push_back(use.id() + "=" + std::to_string(use.working_threshold()));
    return clean_mask(extract_region(channel, use), min_px, opt.fill_holes);
}

int min_px_for(const Image& patch, const ExtractOptions& opt) {
    return opt.min_component_px >= 0 ? opt.min_component_px
                                     : default_min_component_px(std::max(patch.width, patch.height));
}

}  // namespace

TissueMaskSet extract_he_masks(const Image& patch, const ThresholdSet& blue, const ThresholdSet& red,
                               const ExtractOptions& opt) {
    const auto ch = split_channels(patch);
    const int min_px = min_px_for(patch, opt);
    TissueMaskSet out;
    bool ok_n = true, ok_nr = true;
    Mask mn = extract_one(ch[2], blue, opt, min_px, out, ok_n);
    Mask mnr = extract_one(ch[0], red, opt, min_px, out, ok_nr);
    if (!ok_n || !ok_nr) {
        mn = Mask(patch.width, patch.height);
        mnr = Mask(patch.width, patch.height);
    }
    out.rbc = mask_xor(mnr, mn);
    out.nucleus = std::move(mn);
    out.nucleus_plus_rbc = std::move(mnr);
    return out;
}

TissueMaskSet extract_cd20_masks(const Image& patch, const ThresholdSet& blue, const ThresholdSet& green,
                                 const ExtractOptions& opt) {
    const auto ch = split_channels(patch);
    const int min_px = min_px_for(patch, opt);
    TissueMaskSet out;
    bool ok = true;
    out.nucleus = extract_one(ch[2], blue, opt, min_px, out, ok);
    out.positive = extract_one(ch[1], green, opt, min_px, out, ok);
    return out;
}

TissueMaskSet DomainThresholds::extract(const Image& patch, const ExtractOptions& opt) const {
    return domain == Stain::he ? extract_he_masks(patch, blue, other, opt) : extract_cd20_masks(patch, blue, other, opt);
}

DomainThresholds calibrate_domain(Stain domain, std::span<const Image> patches) {
    if (domain != Stain::he && domain != Stain::cd20) throw Error("calibration domain must be he or cd20");
    DomainThresholds d;
    d.domain = domain;
    d.blue = calibrate(domain, Channel::b, patches);
    d.other = calibrate(domain, domain == Stain::he ? Channel::r : Channel::g, patches);
    return d;
}

std::string thresholds_to_json(const std::vector<ThresholdSet>& sets) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : sets) {
        arr.push_back({{"domain", vipastain::to_string(s.domain)},
                       {"channel", to_string(s.channel)},
                       {"thresholds", s.thresholds},
                       {"working_index", s.working_index},
                       {"polarity", to_string(s.polarity)}});
    }
    return arr.dump(2);
}

std::vector<ThresholdSet> thresholds_from_json(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    if (j.is_object()) j = nlohmann::json::array({j});
    std::vector<ThresholdSet> out;
    for (const auto& o : j) {
        ThresholdSet s;
        s.domain = stain_from_string(o.at("domain").get<std::string>());
        s.channel = channel_from_string(o.at("channel").get<std::string>());
        s.thresholds = o.at("thresholds").get<std::vector<int>>();
        s.working_index = o.value("working_index", kDefaultWorkingIndex);
        s.polarity = polarity_from_string(o.value("polarity", std::string("keep-below")));
        s.validate();
        out.push_back(std::move(s));
    }
    return out;
}

DomainThresholds domain_from_sets(Stain domain, const std::vector<ThresholdSet>& sets) {
    DomainThresholds d;
    d.domain = domain;
    const Channel other = domain == Stain::he ? Channel::r : Channel::g;
    bool have_b = false, have_o = false;
    for (const auto& s : sets) {
        if (s.domain != domain) continue;
        if (s.channel == Channel::b) d.blue = s, have_b = true;
        if (s.channel == other) d.other = s, have_o = true;
    }
    if (!have_b || !have_o)
        throw Error("threshold file lacks the " + vipastain::to_string(domain) + " B/" + to_string(other) + " sets");
    return d;
}

}  // namespace vipastain::masks
