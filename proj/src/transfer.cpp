#include "vipastain/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "vipastain/archive.hpp"
#include "vipastain/error.hpp"
#include "vipastain/png_io.hpp"

namespace vipastain::transfer {

using nn::Var;

std::string to_string(MaskLossMode m) { return m == MaskLossMode::l1 ? "l1" : "cross-entropy"; }
std::string to_string(MaskPairing p) { return p == MaskPairing::cycle_only ? "cycle-only" : "cross-domain-nucleus"; }
std::string to_string(Direction d) { return d == Direction::a2b ? "a2b" : "b2a"; }

MaskLossMode mask_loss_mode_from_string(const std::string& s) {
    if (s == "l1" || s == "L1") return MaskLossMode::l1;
    if (s == "cross-entropy" || s == "ce") return MaskLossMode::cross_entropy;
    throw UsageError("unknown mask loss mode '" + s + "' (expected l1 or cross-entropy)");
}

MaskPairing mask_pairing_from_string(const std::string& s) {
    if (s == "cycle-only") return MaskPairing::cycle_only;
    if (s == "cross-domain-nucleus") return MaskPairing::cross_domain_nucleus;
    throw UsageError("unknown mask pairing '" + s + "' (expected cycle-only or cross-domain-nucleus)");
}

Direction direction_from_string(const std::string& s) {
    if (s == "a2b") return Direction::a2b;
    if (s == "b2a") return Direction::b2a;
    throw UsageError("unknown direction '" + s + "' (expected a2b or b2a)");
}

void TransferConfig::validate() const {
    if (patch_size < 8 || patch_size % (1 << std::clamp(downsamples, 0, 4)) != 0)
        throw UsageError("transfer: patch_size must be >= 8 and divisible by 2^downsamples");
    if (epochs < 1) throw UsageError("transfer: epochs must be >= 1");
    if (!(lambda_cycle >= 0) || !(lambda_mask >= 0)) throw UsageError("transfer: loss weights must be >= 0");
    if (!(soft_temperature > 0)) throw UsageError("transfer: soft_temperature must be > 0");
    if (!(learning_rate > 0)) throw UsageError("transfer: learning_rate must be > 0");
    if (batch_size < 1) throw UsageError("transfer: batch_size must be >= 1");
    if (features < 1 || res_blocks < 0 || downsamples < 0 || downsamples > 4) throw UsageError("transfer: bad generator size");
}

std::string TransferConfig::to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "patch_size=" << patch_size << "\n"
       << "epochs=" << epochs << "\n"
       << "lambda_cycle=" << lambda_cycle << "\n"
       << "lambda_mask=" << lambda_mask << "\n"
       << "mask_loss_mode=" << to_string(mask_loss_mode) << "\n"
       << "mask_pairing=" << to_string(mask_pairing) << "\n"
       << "soft_temperature=" << soft_temperature << "\n"
       << "learning_rate=" << learning_rate << "\n"
       << "batch_size=" << batch_size << "\n"
       << "seed=" << seed << "\n"
       << "features=" << features << "\n"
       << "res_blocks=" << res_blocks << "\n"
       << "downsamples=" << downsamples << "\n"
       << "identity_init=" << (identity_init ? "true" : "false") << "\n";
    return os.str();
}

TransferConfig TransferConfig::from_text(const std::string& text) {
    TransferConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("bad config line '" + line + "'");
        const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        if (k == "patch_size") c.patch_size = std::stoi(v);
        else if (k == "epochs") c.epochs = std::stoi(v);
        else if (k == "lambda_cycle") c.lambda_cycle = std::stod(v);
        else if (k == "lambda_mask") c.lambda_mask = std::stod(v);
        else if (k == "mask_loss_mode") c.mask_loss_mode = mask_loss_mode_from_string(v);
        else if (k == "mask_pairing") c.mask_pairing = mask_pairing_from_string(v);
        else if (k == "soft_temperature") c.soft_temperature = std::stod(v);
        else if (k == "learning_rate") c.learning_rate = std::stod(v);
        else if (k == "batch_size") c.batch_size = std::stoi(v);
        else if (k == "seed") c.seed = std::stoull(v);
        else if (k == "features") c.features = std::stoi(v);
        else if (k == "res_blocks") c.res_blocks = std::stoi(v);
        else if (k == "downsamples") c.downsamples = std::stoi(v);
        else if (k == "identity_init") c.identity_init = (v == "true" || v == "1");
        else throw Error("unknown transfer config key '" + k + "'");
    }
    return c;
}

Generator::Generator(int f, int res_blocks, int downsamples, std::mt19937_64& rng, bool identity)
    : stem(3, f, 3, 1, 1, rng) {
    int c = f;
    for (int i = 0; i < downsamples; ++i, c *= 2) down.emplace_back(c, 2 * c, 3, 2, 1, rng);
    for (int i = 0; i < res_blocks; ++i) {
        res.emplace_back(c, c, 3, 1, 1, rng);
        res.emplace_back(c, c, 3, 1, 1, rng, 0.5);
    }
    for (int i = 0; i < downsamples; ++i, c /= 2) up.emplace_back(c, c / 2, 3, 1, 1, rng);
    head = nn::Conv2d(f, 3, 3, 1, 1, rng, 0.5);
    if (identity) head.zero_init();
}

Var Generator::operator()(const Var& x) const {
    const int m = 1 << down.size();
    if (x.shape().c != 3 || x.shape().h % m || x.shape().w % m)
        throw Error("generator expects 3-channel input with sides divisible by " + std::to_string(m) + ", got " +
                    x.shape().str());
    std::vector<Var> skips{nn::relu(stem(x))};
    for (const auto& d : down) skips.push_back(nn::relu(d(skips.back())));
    Var y = skips.back();
    for (std::size_t i = 0; i + 1 < res.size(); i += 2) y = nn::add(y, res[i + 1](nn::relu(res[i](y))));
    for (std::size_t i = 0; i < up.size(); ++i)
        y = nn::add(nn::relu(up[i](nn::upsample2x(y))), skips[skips.size() - 2 - i]);
    return nn::clamp(nn::add(x, head(y)), -1.0, 1.0);
}

std::vector<Var*> Generator::params() {
    std::vector<Var*> p{&stem.weight, &stem.bias};
    for (auto* group : {&down, &res, &up})
        for (auto& c : *group) p.insert(p.end(), {&c.weight, &c.bias});
    p.insert(p.end(), {&head.weight, &head.bias});
    return p;
}

Discriminator::Discriminator(int f, std::mt19937_64& rng)
    : c1(3, f, 3, 2, 1, rng), c2(f, 2 * f, 3, 2, 1, rng), c3(2 * f, 4 * f, 3, 2, 1, rng), c4(4 * f, 1, 3, 1, 1, rng) {}

Var Discriminator::operator()(const Var& x) const {
    Var h = nn::leaky_relu(c1(x), 0.2);
    h = nn::leaky_relu(c2(h), 0.2);
    h = nn::leaky_relu(c3(h), 0.2);
    return nn::sigmoid(c4(h));
}

std::vector<Var*> Discriminator::params() {
    return {&c1.weight, &c1.bias, &c2.weight, &c2.bias, &c3.weight, &c3.bias, &c4.weight, &c4.bias};
}

std::vector<Var*> TranslatorBundle::generator_params() {
    auto p = g_ab.params();
    auto q = g_ba.params();
    p.insert(p.end(), q.begin(), q.end());
    return p;
}

std::vector<Var*> TranslatorBundle::discriminator_params() {
    auto p = d_a.params();
    auto q = d_b.params();
    p.insert(p.end(), q.begin(), q.end());
    return p;
}

TranslatorBundle make_bundle(const TransferConfig& config, const masks::DomainThresholds& a,
                             const masks::DomainThresholds& b, std::optional<Init> init) {
    config.validate();
    if (a.domain != Stain::he || b.domain != Stain::cd20)
        throw Error("translator needs H&E thresholds for domain A and CD20 thresholds for domain B");
    const bool identity = init ? *init == Init::identity : config.identity_init;
    std::mt19937_64 rng(config.seed);
    TranslatorBundle t;
    t.config = config;
    t.g_ab = Generator(config.features, config.res_blocks, config.downsamples, rng, identity);
    t.g_ba = Generator(config.features, config.res_blocks, config.downsamples, rng, identity);
    t.d_a = Discriminator(config.features, rng);
    t.d_b = Discriminator(config.features, rng);
    t.thresholds_a = a;
    t.thresholds_b = b;
    t.opt_g.lr = t.opt_d.lr = config.learning_rate;
    return t;
}

AdversarialLoss adversarial_loss(const Var& d_real, const Var& d_fake) {
    for (const Var* v : {&d_real, &d_fake})
        for (double s : v->value().data)
            if (!std::isfinite(s)) throw Error("adversarial_loss: non-finite discriminator score");
    return {nn::add(nn::neg_log_mean(d_real, kScoreEps), nn::neg_log1m_mean(d_fake, kScoreEps)),
            nn::neg_log_mean(d_fake, kScoreEps)};
}

Var cycle_image_loss(const Var& x, const Var& x_rec) {
    if (!(x.shape() == x_rec.shape()))
        throw Error("cycle_image_loss: shape mismatch " + x.shape().str() + " vs " + x_rec.shape().str());
    return nn::l1_mean(x, x_rec);
}

namespace {

Var soft_region(const masks::ThresholdSet& ts, const Var& x, double temperature) {
    return nn::soft_threshold(x, static_cast<int>(ts.channel), ts.working_threshold(), temperature,
                              ts.polarity == masks::Polarity::keep_below);
}

// Soft XOR: a + b - 2ab.
Var soft_xor(const Var& a, const Var& b) { return nn::sub(nn::add(a, b), nn::scale(nn::mul(a, b), 2.0)); }

const Var* find_kind(const SoftMaskSet& s, const std::string& kind) {
    for (const auto& [k, v] : s)
        if (k == kind) return &v;
    return nullptr;
}

// Parameters of a module stop collecting gradients for the scope's lifetime.
class FrozenScope {
public:
    explicit FrozenScope(std::vector<Var*> params) : params_(std::move(params)) {
        for (auto* p : params_) p->node()->requires_grad = false;
    }
    ~FrozenScope() {
        for (auto* p : params_) p->node()->requires_grad = true;
    }
    FrozenScope(const FrozenScope&) = delete;
    FrozenScope& operator=(const FrozenScope&) = delete;

private:
    std::vector<Var*> params_;
};

void check_finite(const LossReport& r, std::int64_t step) {
    for (double v : {r.l_gan_ab, r.l_gan_ba, r.l_cycle_img, r.l_cycle_mask, r.l_disc_a, r.l_disc_b}) {
        if (!std::isfinite(v)) {
            std::ostringstream os;
            os << "non-finite loss at step " << step << ": l_gan_ab=" << r.l_gan_ab << " l_gan_ba=" << r.l_gan_ba
               << " l_cycle_img=" << r.l_cycle_img << " l_cycle_mask=" << r.l_cycle_mask
               << " l_disc_a=" << r.l_disc_a << " l_disc_b=" << r.l_disc_b;
            throw Error(os.str());
        }
    }
}

}  // namespace

SoftMaskSet soft_masks(const masks::DomainThresholds& th, const Var& x, double temperature) {
    SoftMaskSet s;
    const Var n = soft_region(th.blue, x, temperature);
    s.emplace_back("nucleus", n);
    if (th.domain == Stain::he) {
        const Var nr = soft_region(th.other, x, temperature);
        s.emplace_back("nucleus_plus_rbc", nr);
        s.emplace_back("rbc", soft_xor(nr, n));
    } else {
        s.emplace_back("positive", soft_region(th.other, x, temperature));
    }
    return s;
}

Var mask_consistency_loss(const SoftMaskSet& src, const SoftMaskSet& dst, MaskLossMode mode) {
    std::vector<Var> terms;
    for (const auto& [kind, m_src] : src) {
        const Var* m_dst = find_kind(dst, kind);
        if (!m_dst) continue;
        if (mode == MaskLossMode::l1) {
            terms.push_back(nn::l1_mean(m_src, *m_dst));
        } else {
            nn::Tensor target(m_src.shape());
            for (std::size_t i = 0; i < target.size(); ++i) target.data[i] = m_src.value().data[i] >= 0.5 ? 1.0 : 0.0;
            terms.push_back(nn::bce_mean(*m_dst, target, kScoreEps));
        }
    }
    if (terms.empty()) throw Error("mask_consistency_loss: no mask kinds present on both sides");
    Var total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = nn::add(total, terms[i]);
    return terms.size() == 1 ? total : nn::scale(total, 1.0 / static_cast<double>(terms.size()));
}

std::pair<Var, Var> forward_cycle(const TranslatorBundle& b, const Var& x_a) {
    Var fake_b = b.g_ab(x_a);
    Var rec_a = b.g_ba(fake_b);
    return {fake_b, rec_a};
}

std::pair<Var, Var> backward_cycle(const TranslatorBundle& b, const Var& x_b) {
    Var fake_a = b.g_ba(x_b);
    Var rec_b = b.g_ab(fake_a);
    return {fake_a, rec_b};
}

GeneratorObjective generator_objective(const TranslatorBundle& b, const nn::Tensor& x_a, const nn::Tensor& x_b) {
    const auto& cfg = b.config;
    const Var xa = nn::constant(x_a), xb = nn::constant(x_b);
    auto [fake_b, rec_a] = forward_cycle(b, xa);
    auto [fake_a, rec_b] = backward_cycle(b, xb);

    const Var gan_ab = nn::neg_log_mean(b.d_b(fake_b), kScoreEps);
    const Var gan_ba = nn::neg_log_mean(b.d_a(fake_a), kScoreEps);
    const Var cyc = nn::add(cycle_image_loss(xa, rec_a), cycle_image_loss(xb, rec_b));

    const double T = cfg.soft_temperature;
    const SoftMaskSet ma = soft_masks(b.thresholds_a, xa, T), mb = soft_masks(b.thresholds_b, xb, T);
    Var mask = nn::add(mask_consistency_loss(ma, soft_masks(b.thresholds_a, rec_a, T), cfg.mask_loss_mode),
                       mask_consistency_loss(mb, soft_masks(b.thresholds_b, rec_b, T), cfg.mask_loss_mode));
    if (cfg.mask_pairing == MaskPairing::cross_domain_nucleus) {
        const SoftMaskSet na{ma.front()}, nb{mb.front()};
        mask = nn::add(mask, mask_consistency_loss(na, soft_masks(b.thresholds_b, fake_b, T), cfg.mask_loss_mode));
        mask = nn::add(mask, mask_consistency_loss(nb, soft_masks(b.thresholds_a, fake_a, T), cfg.mask_loss_mode));
    }

    Var total = nn::add(gan_ab, gan_ba);
    if (cfg.lambda_cycle != 0) total = nn::add(total, nn::scale(cyc, cfg.lambda_cycle));
    if (cfg.lambda_mask != 0) total = nn::add(total, nn::scale(mask, cfg.lambda_mask));

    GeneratorObjective o;
    o.total = total;
    o.parts.l_gan_ab = gan_ab.item();
    o.parts.l_gan_ba = gan_ba.item();
    o.parts.l_cycle_img = cyc.item();
    o.parts.l_cycle_mask = mask.item();
    o.fake_a = fake_a;
    o.fake_b = fake_b;
    return o;
}

LossReport train_step(TranslatorBundle& b, const nn::Tensor& x_a, const nn::Tensor& x_b) {
    auto gparams = b.generator_params();
    auto dparams = b.discriminator_params();
    for (auto* p : gparams) p->zero_grad();
    for (auto* p : dparams) p->zero_grad();

    GeneratorObjective obj;
    {
        FrozenScope freeze(dparams);
        obj = generator_objective(b, x_a, x_b);
        check_finite(obj.parts, b.step + 1);
        nn::backward(obj.total);
    }

    const Var xa = nn::constant(x_a), xb = nn::constant(x_b);
    const AdversarialLoss adv_a = adversarial_loss(b.d_a(xa), b.d_a(nn::detach(obj.fake_a)));
    const AdversarialLoss adv_b = adversarial_loss(b.d_b(xb), b.d_b(nn::detach(obj.fake_b)));
    LossReport r = obj.parts;
    r.l_disc_a = adv_a.disc.item();
    r.l_disc_b = adv_b.disc.item();
    check_finite(r, b.step + 1);

    b.opt_g.update(gparams);
    nn::backward(nn::add(adv_a.disc, adv_b.disc));
    b.opt_d.update(dparams);
    for (auto* p : gparams) p->zero_grad();
    for (auto* p : dparams) p->zero_grad();
    r.step = ++b.step;
    return r;
}

nn::Tensor images_to_tensor(const std::vector<const Image*>& images) {
    if (images.empty()) throw Error("images_to_tensor: empty batch");
    const int w = images[0]->width, h = images[0]->height;
    nn::Tensor t(nn::Shape{static_cast<int>(images.size()), 3, h, w});
    for (std::size_t n = 0; n < images.size(); ++n) {
        const Image& im = *images[n];
        if (im.channels != 3 || im.width != w || im.height != h)
            throw Error("images_to_tensor: batch images must be RGB and share dimensions");
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) t.at(static_cast<int>(n), c, y, x) = im.at(x, y, c) / 127.5 - 1.0;
    }
    return t;
}

Image tensor_to_image(const nn::Tensor& t, int index) {
    if (t.shape.c != 3) throw Error("tensor_to_image: expected 3 channels");
    Image im(t.shape.w, t.shape.h, 3);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < t.shape.h; ++y)
            for (int x = 0; x < t.shape.w; ++x) {
                const double v = std::round((t.at(index, c, y, x) + 1.0) * 127.5);
                im.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
            }
    return im;
}

std::vector<Image> load_domain_images(const DatasetManifest& m, Stain stain) {
    auto rows = m.by_stain(stain);
    const bool has_train = std::any_of(rows.begin(), rows.end(), [](const ManifestRow* r) { return r->split == "train"; });
    std::vector<Image> out;
    for (const auto* r : rows)
        if (!has_train || r->split == "train") out.push_back(read_png(m.resolve(r->image_path)));
    return out;
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::int64_t epoch, std::uint64_t salt) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed ^ salt ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(epoch + 1)));
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

void check_images(const std::vector<Image>& imgs, const char* what) {
    if (imgs.empty()) throw Error(std::string("transfer: no ") + what + " training images");
    for (const auto& im : imgs)
        if (im.channels != 3 || im.width != imgs[0].width || im.height != imgs[0].height)
            throw Error(std::string("transfer: ") + what + " images must be RGB with equal dimensions");
}

}  // namespace

TranslatorBundle train(const TransferConfig& config, const std::vector<Image>& images_a,
                       const std::vector<Image>& images_b, const masks::DomainThresholds& th_a,
                       const masks::DomainThresholds& th_b, const TrainOptions& opt) {
    config.validate();
    check_images(images_a, "H&E");
    check_images(images_b, "CD20");
    TranslatorBundle b = opt.resume_from ? load_checkpoint(*opt.resume_from) : make_bundle(config, th_a, th_b);
    if (opt.resume_from && b.config.to_text() != config.to_text())
        throw Error("resume: checkpoint config differs from the requested config");

    const auto batch = static_cast<std::size_t>(config.batch_size);
    const std::size_t na = images_a.size(), nb = images_b.size();
    const auto steps_per_epoch = static_cast<std::int64_t>((std::max(na, nb) + batch - 1) / batch);
    const std::int64_t total_steps = steps_per_epoch * config.epochs;

    std::ofstream csv;
    if (opt.loss_csv) {
        if (opt.loss_csv->has_parent_path()) std::filesystem::create_directories(opt.loss_csv->parent_path());
        const bool append = opt.resume_from && std::filesystem::exists(*opt.loss_csv);
        csv.open(*opt.loss_csv, append ? std::ios::app : std::ios::trunc);
        if (!csv) throw IoError("cannot write loss log: " + opt.loss_csv->string());
        if (!append) csv << "step,l_gan_ab,l_gan_ba,l_cycle_img,l_cycle_mask\n";
        csv << std::setprecision(10);
    }

    std::int64_t cur_epoch = -1;
    std::vector<std::size_t> order_a, order_b;
    std::int64_t done = 0;
    while (b.step < total_steps && (opt.max_steps < 0 || done < opt.max_steps)) {
        const std::int64_t epoch = b.step / steps_per_epoch, j = b.step % steps_per_epoch;
        if (epoch != cur_epoch) {
            order_a = epoch_order(na, config.seed, epoch, 0xa);
            order_b = epoch_order(nb, config.seed, epoch, 0xb);
            cur_epoch = epoch;
        }
        std::vector<const Image*> ba, bb;
        for (std::size_t i = 0; i < batch; ++i) {
            const std::size_t k = static_cast<std::size_t>(j) * batch + i;
            ba.push_back(&images_a[order_a[k % na]]);
            bb.push_back(&images_b[order_b[k % nb]]);
        }
        const LossReport r = train_step(b, images_to_tensor(ba), images_to_tensor(bb));
        ++done;
        if (csv.is_open())
            csv << r.step << "," << r.l_gan_ab << "," << r.l_gan_ba << "," << r.l_cycle_img << "," << r.l_cycle_mask
                << "\n";
        if (opt.on_step) opt.on_step(r);
    }
    if (opt.checkpoint_out) save_checkpoint(b, *opt.checkpoint_out);
    return b;
}

void save_checkpoint(const TranslatorBundle& b, const std::filesystem::path& path) {
    auto& m = const_cast<TranslatorBundle&>(b);
    Archive ar;
    ar.put_text("kind", "translator");
    ar.put_text("config", b.config.to_text());
    ar.put_text("thresholds/a", masks::thresholds_to_json({b.thresholds_a.blue, b.thresholds_a.other}));
    ar.put_text("thresholds/b", masks::thresholds_to_json({b.thresholds_b.blue, b.thresholds_b.other}));
    ar.put_i64("step", b.step);
    put_params(ar, "g_ab", m.g_ab.params());
    put_params(ar, "g_ba", m.g_ba.params());
    put_params(ar, "d_a", m.d_a.params());
    put_params(ar, "d_b", m.d_b.params());
    put_adam(ar, "opt_g", b.opt_g);
    put_adam(ar, "opt_d", b.opt_d);
    ar.save(path);
}

TranslatorBundle load_checkpoint(const std::filesystem::path& path) {
    const Archive ar = Archive::load(path);
    if (!ar.has("kind") || ar.get("kind") != "translator") throw Error("not a translator checkpoint: " + path.string());
    const TransferConfig cfg = TransferConfig::from_text(ar.get("config"));
    const auto th_a = masks::domain_from_sets(Stain::he, masks::thresholds_from_json(ar.get("thresholds/a")));
    const auto th_b = masks::domain_from_sets(Stain::cd20, masks::thresholds_from_json(ar.get("thresholds/b")));
    TranslatorBundle b = make_bundle(cfg, th_a, th_b, Init::identity);
    b.step = ar.get_i64("step");
    get_params(ar, "g_ab", b.g_ab.params());
    get_params(ar, "g_ba", b.g_ba.params());
    get_params(ar, "d_a", b.d_a.params());
    get_params(ar, "d_b", b.d_b.params());
    get_adam(ar, "opt_g", b.opt_g);
    get_adam(ar, "opt_d", b.opt_d);
    return b;
}

Image translate(const TranslatorBundle& b, const Image& img, Direction d) {
    const Var x = nn::constant(images_to_tensor({&img}));
    const Var y = d == Direction::a2b ? b.g_ab(x) : b.g_ba(x);
    return tensor_to_image(y.value());
}

std::vector<Patch> synthesize(const TranslatorBundle& b, const std::vector<Patch>& patches, Direction d) {
    const Stain want = d == Direction::a2b ? Stain::he : Stain::cd20;
    std::vector<Patch> out;
    out.reserve(patches.size());
    for (const auto& p : patches) {
        if (p.stain != want)
            throw Error("synthesize " + to_string(d) + ": patch " + p.slide_id + " is " + to_string(p.stain) +
                        ", expected " + to_string(want));
        Patch v = p;
        v.stain = d == Direction::a2b ? Stain::virtual_cd20 : Stain::virtual_he;
        v.image = translate(b, p.image, d);
        out.push_back(std::move(v));
    }
    return out;
}

}  // namespace vipastain::transfer
