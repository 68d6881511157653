#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <torch/torch.h>

namespace dtune {

/// Linear-beta schedule with cumulative products kept in float64.
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> betas;
    std::vector<double> alphas_bar;

    static NoiseSchedule linear(int steps = 200, double beta_start = 1e-4, double beta_end = 0.07);

    /// sqrt(alphas_bar[t]) and sqrt(1 - alphas_bar[t]) gathered for a batch of
    /// timesteps, shaped [B, 1, 1, 1] for broadcasting.
    torch::Tensor signal_scale(const torch::Tensor& t, torch::ScalarType dtype) const;
    torch::Tensor noise_scale(const torch::Tensor& t, torch::ScalarType dtype) const;
};

/// z_t = sqrt(ab[t]) x0 + sqrt(1 - ab[t]) eps, with t a [B] int64 tensor.
torch::Tensor noise_sample(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                           const torch::Tensor& eps);

/// Layer id -> multiplicative offset for that projection, either [M, N]
/// (shared by the batch) or [B, M, N] (per sample).
using LayerDeltas = std::unordered_map<std::string, torch::Tensor>;

/// Anything that can produce offsets for the denoiser's attention projections.
class OffsetSource {
public:
    virtual ~OffsetSource() = default;
    virtual std::vector<std::string> layer_ids() const = 0;
    /// `concept_features` is the aggregated backbone descriptor [B, F]; sources
    /// that do not depend on the concept image ignore it.
    virtual LayerDeltas materialize_all(const torch::Tensor& concept_features) = 0;
};

struct DenoiserConfig {
    int resolution = 32;
    std::vector<int> channels{32, 64, 128};
    int embed_dim = 64;
    int seq_len = 8;
    int vocab_size = 16;
    int time_dim = 128;
    int groups = 8;
    int head_dim = 32;
    int timesteps = 200;
};

/// W = W0 * (1 + dW), elementwise.
torch::Tensor modulate(const torch::Tensor& w0, const torch::Tensor& delta);

/// Bias-free linear projection whose weight can be modulated per call.
class ProjectionImpl : public torch::nn::Module {
public:
    ProjectionImpl(int in_features, int out_features);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& delta = {});
    torch::Tensor weight;
};
TORCH_MODULE(Projection);

class AttentionImpl : public torch::nn::Module {
public:
    /// `context_dim` == 0 makes this a self-attention layer.
    AttentionImpl(std::string layer_prefix, int channels, int context_dim, int groups, int head_dim);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context, const LayerDeltas* deltas);

    bool is_cross() const { return cross_; }
    const std::string& prefix() const { return prefix_; }
    std::vector<std::string> layer_ids() const;
    Projection proj(char which) const;

private:
    std::string prefix_;
    bool cross_;
    int heads_;
    torch::nn::GroupNorm norm{nullptr};
    Projection q{nullptr}, k{nullptr}, v{nullptr};
    torch::nn::Linear o{nullptr};
};
TORCH_MODULE(Attention);

class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int in_ch, int out_ch, int time_dim, int groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

private:
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(ResBlock);

/// One resolution level: residual block, optional self-attention, cross-attention.
class UNetBlockImpl : public torch::nn::Module {
public:
    UNetBlockImpl(const std::string& prefix, int in_ch, int out_ch, bool self_attention, const DenoiserConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb, const torch::Tensor& context,
                          const LayerDeltas* deltas, bool skip_cross);
    std::vector<Attention> attentions() const;

private:
    ResBlock res{nullptr};
    Attention self_attn{nullptr};
    Attention cross_attn{nullptr};
};
TORCH_MODULE(UNetBlock);

class MidBlockImpl : public torch::nn::Module {
public:
    MidBlockImpl(int ch, const DenoiserConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb, const torch::Tensor& context,
                          const LayerDeltas* deltas, bool skip_cross);
    std::vector<Attention> attentions() const;

private:
    ResBlock res1{nullptr}, res2{nullptr};
    Attention self_attn{nullptr}, cross_attn{nullptr};
};
TORCH_MODULE(MidBlock);

/// U-Net with D down blocks, a middle block and D up blocks. Self-attention
/// sits at the two coarsest resolutions, cross-attention in every block, and
/// conditioning is a raw token-embedding sequence [B, L, d].
class DenoiserImpl : public torch::nn::Module {
public:
    explicit DenoiserImpl(const DenoiserConfig& cfg);

    /// eps prediction. Images are [B, 3, H, W] in [-1, 1]; t is [B] int64.
    /// Explicit `deltas` take precedence over an attached offset source.
    torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& cond,
                          const LayerDeltas* deltas = nullptr);

    /// Spatially pooled outputs of every down block and the middle block
    /// (cross-attention bypassed, so no conditioning is needed).
    std::vector<torch::Tensor> pooled_block_features(const torch::Tensor& z, const torch::Tensor& t,
                                                     const LayerDeltas* deltas = nullptr);
    std::vector<int> pooled_feature_widths() const;

    /// Token ids [B, L] -> embeddings [B, L, d].
    torch::Tensor embed_tokens(const torch::Tensor& ids);
    /// Frozen embedding of the domain's coarse descriptor.
    const torch::Tensor& domain_embedding() const { return domain_embedding_; }

    /// Stable ids ("down.1.self.q", ...) with their [M, N] weight shapes.
    std::vector<std::string> attention_layer_ids() const;
    std::vector<std::pair<std::string, std::vector<int64_t>>> attention_layer_shapes() const;
    torch::Tensor& projection_weight(const std::string& layer_id);

    void attach(std::shared_ptr<OffsetSource> offsets);
    void detach();
    bool attached() const { return static_cast<bool>(attached_); }
    std::shared_ptr<OffsetSource> attached_source() const { return attached_; }

    const DenoiserConfig& config() const { return cfg_; }
    torch::ScalarType dtype() const { return conv_in->weight.scalar_type(); }

private:
    torch::Tensor time_embedding(const torch::Tensor& t);
    torch::Tensor run(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& cond,
                      const LayerDeltas* deltas);
    std::vector<Attention> all_attentions() const;

    DenoiserConfig cfg_;
    torch::nn::Embedding tokens{nullptr};
    torch::Tensor domain_embedding_;
    torch::nn::Linear time1{nullptr}, time2{nullptr};
    torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
    torch::nn::GroupNorm norm_out{nullptr};
    torch::nn::ModuleList down{nullptr};
    torch::nn::ModuleList downsample{nullptr};
    MidBlock mid{nullptr};
    torch::nn::ModuleList up{nullptr};
    torch::nn::ModuleList upsample{nullptr};
    std::shared_ptr<OffsetSource> attached_;
};
TORCH_MODULE(Denoiser);

/// Conditioning callback: (t, z_t) -> sequence [B, L, d].
using CondProvider = std::function<torch::Tensor(int t, const torch::Tensor& z_t)>;
/// Noise-prediction callback used by the sampler: (z_t, t, cond) -> eps.
using NoisePredictor = std::function<torch::Tensor(const torch::Tensor& z, const torch::Tensor& t,
                                                   const torch::Tensor& cond)>;

struct SamplerOptions {
    int steps = 50;
    std::uint64_t seed = 0;
    int batch = 1;
};

/// Descending timesteps visited by the deterministic sampler.
std::vector<int> sampler_timesteps(const NoiseSchedule& schedule, int steps);

/// Deterministic DDIM (eta = 0). The provider is called exactly once per step
/// with the current z_t; the returned image is in [0, 1], [B, 3, H, W].
torch::Tensor sample(const NoisePredictor& predict, const NoiseSchedule& schedule, const CondProvider& cond,
                     const SamplerOptions& opts, int resolution, torch::ScalarType dtype = torch::kFloat32);

/// Convenience overload for a plain denoiser.
torch::Tensor sample(Denoiser& model, const NoiseSchedule& schedule, const CondProvider& cond,
                     const SamplerOptions& opts, const LayerDeltas* deltas = nullptr);

/// mean_b sum_pixels mask * (eps - pred)^2.
torch::Tensor masked_sq_error(const torch::Tensor& eps, const torch::Tensor& pred, const torch::Tensor& mask = {});

/// Monte-Carlo diffusion loss of a predictor over a batch of clean images.
torch::Tensor diffusion_loss(const NoisePredictor& predict, const torch::Tensor& x0, const torch::Tensor& cond,
                             const NoiseSchedule& schedule, torch::Generator& gen);

/// Standard normal / uniform timestep draws from an explicit generator.
torch::Tensor randn(torch::IntArrayRef shape, torch::Generator& gen, torch::ScalarType dtype = torch::kFloat32);
torch::Generator make_generator(std::uint64_t seed);

}  // namespace dtune
