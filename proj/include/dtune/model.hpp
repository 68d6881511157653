#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dtune/checkpoint.hpp"
#include "dtune/diffusion.hpp"
#include "dtune/encoder.hpp"
#include "dtune/offsets.hpp"
#include "dtune/sprite.hpp"

namespace dtune {

struct ModelConfig {
    DenoiserConfig denoiser;
    BackboneConfig backbone;
    EncoderConfig encoder;
    OffsetMode offset_mode = OffsetMode::kRegularized;
    OffsetOptions offsets;
    double beta_start = 1e-4;
    double beta_end = 0.07;
    int sampler_steps = 50;
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
/// Expects a complete, already validated record.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// The concept image plus its cached backbone taps, batched to the call's size.
struct ConceptInput {
    torch::Tensor image;  // [B, 3, H, W] in [0, 1]
    std::vector<torch::Tensor> taps;
    torch::Tensor aggregated;  // taps concatenated, [B, F]

    ConceptInput expand(int64_t batch) const;
};

struct Conditioning {
    torch::Tensor sequence;  // [B, L, d]
    ConceptEmbedding embedding;
};

struct LossTerms {
    torch::Tensor total;
    torch::Tensor diffusion;
    torch::Tensor reg;
};

/// One record per sampler step of a per-timestep provider.
struct ProviderRecord {
    int t = 0;
    double offset_norm = 0.0;
    double distance = 0.0;  // ||e_c - domain_embedding||
    bool frozen = false;
};

/// Token ids [B, L] and placeholder positions [B] for a prompt template.
std::pair<torch::Tensor, torch::Tensor> prompt_tensors(int template_id, int64_t batch);

/// Denoiser, encoder head, weight offsets and the frozen backbone, bundled so
/// that every training and sampling path composes them the same way.
class DomainModel {
public:
    /// Parameters are drawn from `init_seed`. A backbone tensor map, if given,
    /// is loaded into the (always frozen) backbone.
    DomainModel(const ModelConfig& cfg, std::uint64_t init_seed, const TensorMap* backbone_tensors = nullptr);

    const ModelConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    bool has_offsets() const { return static_cast<bool>(offsets); }

    ConceptInput encode_concept(const torch::Tensor& image01);
    /// Materialized offsets (empty without offsets). Hypernetwork offsets are per sample.
    LayerDeltas deltas(const ConceptInput& concept_input);

    /// Encoder offset at (z_t, t), composed embedding and the substituted sequence.
    Conditioning condition(const ConceptInput& concept_input, const torch::Tensor& token_ids,
                           const torch::Tensor& placeholder, const torch::Tensor& z, const torch::Tensor& t,
                           const LayerDeltas* deltas);
    /// Sequence with an explicit concept embedding [B, d] in the slot.
    torch::Tensor condition_with_embedding(const torch::Tensor& e_c, const torch::Tensor& token_ids,
                                           const torch::Tensor& placeholder);

    torch::Tensor predict(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& sequence,
                          const LayerDeltas* deltas);

    /// L = L_diffusion + lambda_reg * L_reg for explicit (t, eps); x0 is the
    /// concept image batch itself.
    LossTerms loss(const ConceptInput& concept_input, const torch::Tensor& token_ids, const torch::Tensor& placeholder,
                   const torch::Tensor& t, const torch::Tensor& eps, const torch::Tensor& mask, double lambda_reg);

    /// Per-timestep conditioning for the sampler. After the step at t <= t_stop
    /// the last embedding is reused; t_stop < 0 never freezes.
    CondProvider provider(const ConceptInput& concept_input, int template_id, const LayerDeltas* deltas,
                          int t_stop = -1, std::vector<ProviderRecord>* trace = nullptr);

    /// Deterministic sampling of `batch` images for a concept and prompt.
    torch::Tensor sample(const torch::Tensor& concept_image01, int template_id, std::uint64_t seed, int batch = 1,
                         int t_stop = -1, std::vector<ProviderRecord>* trace = nullptr);

    /// Named tensors grouped as "denoiser.*", "encoder.*", "offsets.*", "backbone.*".
    TensorMap export_tensors(bool include_backbone = false) const;
    /// Strict import of the non-backbone groups; StructureError lists every
    /// missing, extra or mis-shaped name.
    void import_tensors(const TensorMap& tensors);
    TensorMap backbone_tensors() const;

    std::vector<torch::Tensor> group_parameters(const std::string& group);
    std::string group_hash(const std::string& group) const;

    std::unique_ptr<DomainModel> clone() const;
    void set_dtype(torch::ScalarType dtype);
    torch::ScalarType dtype() const { return denoiser->dtype(); }

    Denoiser denoiser{nullptr};
    EncoderHead encoder{nullptr};
    OffsetSet offsets{nullptr};
    Backbone backbone{nullptr};

private:
    std::vector<std::pair<std::string, torch::Tensor>> named(bool include_backbone) const;

    ModelConfig cfg_;
    NoiseSchedule schedule_;
};

HostTensor to_host(const torch::Tensor& t);
torch::Tensor from_host(const HostTensor& h);

/// [1, 3, H, W] tensor in [0, 1] from an HWC image, and back from [3, H, W] or [1, 3, H, W].
torch::Tensor image_to_tensor(const Image& img);
Image tensor_to_image(const torch::Tensor& t);
/// [1, 1, H, W] float mask.
torch::Tensor mask_to_tensor(const Mask& mask);

}  // namespace dtune
