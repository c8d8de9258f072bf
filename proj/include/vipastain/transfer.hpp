#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vipastain/image.hpp"
#include "vipastain/manifest.hpp"
#include "vipastain/maskextract.hpp"
#include "vipastain/nn.hpp"

// Mask-guided cycle-consistent translation between H&E (domain A) and CD20
// (domain B).
namespace vipastain::transfer {

enum class MaskLossMode { l1, cross_entropy };
enum class MaskPairing { cycle_only, cross_domain_nucleus };
enum class Direction { a2b, b2a };

std::string to_string(MaskLossMode m);
std::string to_string(MaskPairing p);
std::string to_string(Direction d);
MaskLossMode mask_loss_mode_from_string(const std::string& s);
MaskPairing mask_pairing_from_string(const std::string& s);
Direction direction_from_string(const std::string& s);

struct TransferConfig {
    int patch_size = 64;
    int epochs = 30;
    double lambda_cycle = 10.0;
    double lambda_mask = 5.0;
    MaskLossMode mask_loss_mode = MaskLossMode::l1;
    MaskPairing mask_pairing = MaskPairing::cycle_only;
    double soft_temperature = 5.0;
    double learning_rate = 2e-4;
    int batch_size = 1;
    std::uint64_t seed = 7;
    int features = 8;
    int res_blocks = 3;
    int downsamples = 2;
    bool identity_init = true;

    void validate() const;
    // key=value lines, one per field, stable order.
    std::string to_text() const;
    static TransferConfig from_text(const std::string& text);
};

// Residual encoder-decoder with skip connections at every scale. Output is
// clamp(x + residual, -1, 1), so a zeroed final conv makes it the identity.
struct Generator {
    nn::Conv2d stem, head;
    std::vector<nn::Conv2d> down, up, res;

    Generator() = default;
    Generator(int features, int res_blocks, int downsamples, std::mt19937_64& rng, bool identity);
    nn::Var operator()(const nn::Var& x) const;
    std::vector<nn::Var*> params();
};

// Patch discriminator: a map of per-region realness scores in (0,1).
struct Discriminator {
    nn::Conv2d c1, c2, c3, c4;

    Discriminator() = default;
    Discriminator(int features, std::mt19937_64& rng);
    nn::Var operator()(const nn::Var& x) const;
    std::vector<nn::Var*> params();
};

struct TranslatorBundle {
    TransferConfig config;
    Generator g_ab, g_ba;
    Discriminator d_a, d_b;
    masks::DomainThresholds thresholds_a, thresholds_b;
    std::int64_t step = 0;
    nn::Adam opt_g, opt_d;

    std::vector<nn::Var*> generator_params();
    std::vector<nn::Var*> discriminator_params();
};

enum class Init { identity, random };

TranslatorBundle make_bundle(const TransferConfig& config, const masks::DomainThresholds& a,
                             const masks::DomainThresholds& b, std::optional<Init> init = std::nullopt);

struct LossReport {
    std::int64_t step = 0;
    double l_gan_ab = 0, l_gan_ba = 0, l_cycle_img = 0, l_cycle_mask = 0;
    double l_disc_a = 0, l_disc_b = 0;

    bool operator==(const LossReport&) const = default;
};

inline constexpr double kScoreEps = 1e-7;

struct AdversarialLoss {
    nn::Var disc;
    nn::Var gen;
};

// disc = -mean log d_real - mean log(1 - d_fake); gen = -mean log d_fake.
AdversarialLoss adversarial_loss(const nn::Var& d_real, const nn::Var& d_fake);
nn::Var cycle_image_loss(const nn::Var& x, const nn::Var& x_rec);

// Named soft masks of one image batch, e.g. {"nucleus", m}, {"rbc", m}.
using SoftMaskSet = std::vector<std::pair<std::string, nn::Var>>;

SoftMaskSet soft_masks(const masks::DomainThresholds& th, const nn::Var& x, double temperature);
// Mean over kinds present in both sets. Cross-entropy mode hardens src at 0.5.
nn::Var mask_consistency_loss(const SoftMaskSet& src, const SoftMaskSet& dst, MaskLossMode mode);

std::pair<nn::Var, nn::Var> forward_cycle(const TranslatorBundle& b, const nn::Var& x_a);
std::pair<nn::Var, nn::Var> backward_cycle(const TranslatorBundle& b, const nn::Var& x_b);

struct GeneratorObjective {
    nn::Var total;
    LossReport parts;
    nn::Var fake_a, fake_b;
};

// Generator side of the objective:
// L_GAN_AB + L_GAN_BA + lambda_cycle * L_cycle_img + lambda_mask * L_cycle_mask.
// Terms with zero weight are reported but left out of `total`.
GeneratorObjective generator_objective(const TranslatorBundle& b, const nn::Tensor& x_a, const nn::Tensor& x_b);

// One generator update followed by one discriminator update.
LossReport train_step(TranslatorBundle& b, const nn::Tensor& x_a, const nn::Tensor& x_b);

// [-1,1] NCHW tensor from a batch of RGB images and back.
nn::Tensor images_to_tensor(const std::vector<const Image*>& images);
Image tensor_to_image(const nn::Tensor& t, int index = 0);

struct TrainOptions {
    std::optional<std::filesystem::path> checkpoint_out;
    std::optional<std::filesystem::path> loss_csv;
    std::optional<std::filesystem::path> resume_from;
    std::int64_t max_steps = -1;  // stop early (for tests); <0 runs all epochs
    std::function<void(const LossReport&)> on_step;
};

// Uses split=="train" rows of the given stain when present, all rows otherwise.
std::vector<Image> load_domain_images(const DatasetManifest& m, Stain stain);

TranslatorBundle train(const TransferConfig& config, const std::vector<Image>& images_a,
                       const std::vector<Image>& images_b, const masks::DomainThresholds& th_a,
                       const masks::DomainThresholds& th_b, const TrainOptions& opt = {});

void save_checkpoint(const TranslatorBundle& b, const std::filesystem::path& path);
TranslatorBundle load_checkpoint(const std::filesystem::path& path);

// a2b takes real H&E and yields virtual CD20; b2a takes real CD20.
std::vector<Patch> synthesize(const TranslatorBundle& b, const std::vector<Patch>& patches, Direction d);
Image translate(const TranslatorBundle& b, const Image& img, Direction d);

}  // namespace vipastain::transfer
