#pragma once

#include <vector>

#include <torch/torch.h>

namespace dtune {

struct BackboneConfig {
    int resolution = 32;
    std::vector<int> widths{16, 16, 32, 32, 64, 64};
    int embed_dim = 64;
    int n_classes = 512;
    int groups = 0;  // GroupNorm groups; 0 disables normalization
};

/// Small convolutional identity classifier used frozen as the encoder's
/// feature extractor and as the similarity probe. Taps are the globally
/// pooled outputs of every second block; the probe embedding is the
/// penultimate (pre-classifier) layer.
class BackboneImpl : public torch::nn::Module {
public:
    explicit BackboneImpl(const BackboneConfig& cfg);

    struct Output {
        std::vector<torch::Tensor> taps;
        torch::Tensor embedding;
        torch::Tensor logits;
    };

    /// Images [B, 3, H, W] with values in [0, 1].
    Output forward(const torch::Tensor& images);
    std::vector<int> tap_widths() const;
    int aggregated_width() const;
    const BackboneConfig& config() const { return cfg_; }

private:
    BackboneConfig cfg_;
    torch::nn::ModuleList convs{nullptr};
    torch::nn::ModuleList norms{nullptr};
    torch::nn::Linear embed{nullptr}, classifier{nullptr};
};
TORCH_MODULE(Backbone);

/// Backbone tap vectors of a concept image. Throws ContractError on a
/// resolution mismatch.
std::vector<torch::Tensor> extract_backbone_features(Backbone& backbone, const torch::Tensor& images);

struct EncoderConfig {
    int width = 128;
    double leaky_slope = 0.2;
    double scale = 0.1;  // s in e_c = e_domain + s * offset
    bool iterative_refinement = true;
    bool detach_denoiser_features = false;
};

/// Projects every hierarchical feature vector to a common width, averages over
/// the hierarchy, applies LeakyReLU and a final linear map to the word
/// embedding width. The final layer starts at zero, so an untrained head
/// predicts a zero offset.
class EncoderHeadImpl : public torch::nn::Module {
public:
    EncoderHeadImpl(const std::vector<int>& backbone_widths, const std::vector<int>& denoiser_widths, int embed_dim,
                    const EncoderConfig& cfg);

    /// Offset [B, d]. `denoiser_features` is ignored without iterative refinement.
    torch::Tensor forward(const std::vector<torch::Tensor>& backbone_features,
                          const std::vector<torch::Tensor>& denoiser_features);

    const EncoderConfig& config() const { return cfg_; }
    torch::nn::Linear final_layer() const { return out; }

private:
    EncoderConfig cfg_;
    torch::nn::ModuleList backbone_proj{nullptr};
    torch::nn::ModuleList denoiser_proj{nullptr};
    torch::nn::Linear out{nullptr};
};
TORCH_MODULE(EncoderHead);

struct ConceptEmbedding {
    torch::Tensor e_c;
    torch::Tensor offset;
    torch::Tensor domain_embedding;
    double scale = 0.0;
};

/// e_c = domain_embedding + s * offset. `offset` may be [d] or [B, d].
ConceptEmbedding compose_embedding(const torch::Tensor& offset, const torch::Tensor& domain_embedding, double s);

/// ||offset||^2; averaged over the batch for [B, d] input.
torch::Tensor embedding_reg_loss(const torch::Tensor& offset);

/// Replaces position `placeholder[b]` of `tokens[b]` with `e_c[b]`, leaving
/// every other position bit-identical.
torch::Tensor substitute_placeholder(const torch::Tensor& tokens, const torch::Tensor& placeholder,
                                     const torch::Tensor& e_c);

}  // namespace dtune
