#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dtune/model.hpp"
#include "dtune/sprite.hpp"

namespace dtune {

/// Ablation switches. Scope flags pick which parameter groups are tuned;
/// architecture flags change the model built for the run.
struct AblationFlags {
    bool no_tuning = false;
    bool tune_components_only = false;
    bool tune_denoiser_only = false;
    bool no_iterative_refinement = false;
    bool no_embedding_reg = false;
    bool direct_offsets = false;
    bool encoder_only = false;
    bool hypernetwork = false;

    bool operator==(const AblationFlags&) const = default;
    /// Throws ValidationError for incompatible combinations.
    void validate() const;
    /// Model configuration implied by the architecture flags.
    ModelConfig apply(const ModelConfig& base) const;
    /// Parameter groups updated by a run ("denoiser", "encoder", "offsets").
    std::vector<std::string> trained_groups() const;
};

/// The eight flag names in a fixed order, and a flag set with exactly one of them on.
const std::vector<std::string>& ablation_names();
AblationFlags ablation_from_name(const std::string& name);
std::string ablation_label(const AblationFlags& f);

struct StepLoss {
    int step = 0;
    double total = 0.0;
    double diffusion = 0.0;
    double reg = 0.0;
};

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepLoss>& trace);

struct PretrainConfig {
    int steps = 2000;
    int batch_size = 16;
    int device_count = 1;
    double base_lr = 6.25e-5;
    double lambda_reg = 0.01;
    std::uint64_t seed = 0;
    AblationFlags flags;

    double effective_lr() const { return base_lr * batch_size * device_count; }
};

/// Joint optimization of denoiser, encoder head and offsets over a sprite
/// dataset with x0 = I_c. The backbone stays frozen. Throws NumericError on a
/// non-finite loss. `progress` is called after every step.
std::vector<StepLoss> pretrain(DomainModel& model, const std::vector<DatasetItem>& items, const PretrainConfig& cfg,
                               const std::function<void(const StepLoss&)>& progress = {});

struct PersonalizeConfig {
    int steps = 15;
    int batch_size = 16;
    int device_count = 1;
    double base_lr = 1e-6;
    double lambda_reg = 0.1;
    int template_id = 0;
    std::uint64_t seed = 0;
    AblationFlags flags;

    double effective_lr() const { return base_lr * batch_size * device_count; }

    /// 15 steps with lambda_r = 0.1.
    static PersonalizeConfig face_like();
    /// 5 steps with lambda_r = 1e-4 and base_lr 3e-6.
    static PersonalizeConfig generic();
};

/// B replicas of the concept image with stratified timesteps
/// t_i = floor((i + u_i) T / B) and independent noise.
struct TuningBatch {
    torch::Tensor images;  // [B, 3, H, W] in [0, 1]
    torch::Tensor t;       // [B] int64
    torch::Tensor eps;     // [B, 3, H, W]
};
TuningBatch build_tuning_batch(const torch::Tensor& image01, int batch, const NoiseSchedule& schedule,
                               std::uint64_t seed);

/// Called after every step; returning false stops the run early.
using StepCallback = std::function<bool(const StepLoss&)>;

struct PersonalizationResult {
    std::unique_ptr<DomainModel> model;
    std::vector<StepLoss> trace;
    int steps = 0;
    std::string image_hash;
    torch::Tensor embedding;  // only set by the embedding-only baseline
};

/// Copy of `pretrained` rebuilt for the flags' architecture. Tensors whose
/// names and shapes carry over are copied; the rest are freshly initialized.
std::unique_ptr<DomainModel> model_for_flags(const DomainModel& pretrained, const AblationFlags& flags,
                                             std::uint64_t init_seed = 0);

/// Few-step single-image tuning. `mask` is [1, 1, H, W] or undefined.
PersonalizationResult personalize(const DomainModel& pretrained, const torch::Tensor& image01,
                                  const PersonalizeConfig& cfg, const torch::Tensor& mask = {},
                                  const StepCallback& callback = {});

/// Optimizes only a free concept embedding, initialized at the domain
/// embedding, against the frozen pretrained model (offsets applied, frozen).
PersonalizationResult baseline_embedding_only(const DomainModel& pretrained, const torch::Tensor& image01,
                                              int template_id, int steps, double effective_lr, std::uint64_t seed,
                                              const torch::Tensor& mask = {}, const StepCallback& callback = {});

/// Hash of an image's pixel values.
std::string image_hash(const torch::Tensor& image01);

struct BackboneTrainConfig {
    int n_identities = 512;
    int images_per = 8;
    int steps = 6000;
    int batch_size = 64;
    double lr = 3e-3;  // peak, cosine-decayed to zero
    std::uint64_t seed = 0;
};

struct BackboneTrainResult {
    Backbone backbone{nullptr};
    double train_accuracy = 0.0;
    std::vector<double> loss_trace;
};

BackboneTrainResult train_backbone(const BackboneConfig& cfg, const BackboneTrainConfig& tcfg);

/// Stacks dataset images into [N, 3, H, W].
torch::Tensor stack_images(const std::vector<DatasetItem>& items);

}  // namespace dtune
