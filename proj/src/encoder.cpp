#include "dtune/encoder.hpp"

#include <sstream>

#include "dtune/errors.hpp"

namespace dtune {

BackboneImpl::BackboneImpl(const BackboneConfig& cfg) : cfg_(cfg) {
    if (cfg.widths.size() % 2 != 0 || cfg.widths.empty()) throw ContractError("backbone needs an even number of blocks");
    convs = register_module("convs", torch::nn::ModuleList());
    norms = register_module("norms", torch::nn::ModuleList());
    int prev = 3;
    for (int w : cfg.widths) {
        convs->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, w, 3).padding(1)));
        if (cfg.groups > 0) norms->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(cfg.groups, w)));
        prev = w;
    }
    embed = register_module("embed", torch::nn::Linear(prev, cfg.embed_dim));
    classifier = register_module("classifier", torch::nn::Linear(cfg.embed_dim, cfg.n_classes));
}

BackboneImpl::Output BackboneImpl::forward(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.resolution ||
        images.size(3) != cfg_.resolution) {
        std::ostringstream os;
        os << "backbone expects [B, 3, " << cfg_.resolution << ", " << cfg_.resolution << "] images, got "
           << images.sizes();
        throw ContractError(os.str());
    }
    Output out;
    auto h = images * 2.0 - 1.0;
    const size_t n = cfg_.widths.size();
    for (size_t i = 0; i < n; ++i) {
        h = convs[i]->as<torch::nn::Conv2d>()->forward(h);
        if (cfg_.groups > 0) h = norms[i]->as<torch::nn::GroupNorm>()->forward(h);
        h = torch::relu(h);
        if (i % 2 == 1) {
            out.taps.push_back(h.mean({2, 3}));
            if (i + 1 < n) h = torch::avg_pool2d(h, 2);
        }
    }
    out.embedding = embed(out.taps.back());
    out.logits = classifier(out.embedding);
    return out;
}

std::vector<int> BackboneImpl::tap_widths() const {
    std::vector<int> w;
    for (size_t i = 1; i < cfg_.widths.size(); i += 2) w.push_back(cfg_.widths[i]);
    return w;
}

int BackboneImpl::aggregated_width() const {
    int total = 0;
    for (int w : tap_widths()) total += w;
    return total;
}

std::vector<torch::Tensor> extract_backbone_features(Backbone& backbone, const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    return backbone->forward(images).taps;
}

EncoderHeadImpl::EncoderHeadImpl(const std::vector<int>& backbone_widths, const std::vector<int>& denoiser_widths,
                                 int embed_dim, const EncoderConfig& cfg)
    : cfg_(cfg) {
    backbone_proj = register_module("backbone_proj", torch::nn::ModuleList());
    for (int w : backbone_widths) backbone_proj->push_back(torch::nn::Linear(w, cfg.width));
    denoiser_proj = register_module("denoiser_proj", torch::nn::ModuleList());
    if (cfg.iterative_refinement) {
        for (int w : denoiser_widths) denoiser_proj->push_back(torch::nn::Linear(w, cfg.width));
    }
    out = register_module("out", torch::nn::Linear(cfg.width, embed_dim));
    torch::NoGradGuard no_grad;
    out->weight.zero_();
    out->bias.zero_();
}

torch::Tensor EncoderHeadImpl::forward(const std::vector<torch::Tensor>& backbone_features,
                                       const std::vector<torch::Tensor>& denoiser_features) {
    if (backbone_features.size() != backbone_proj->size()) {
        throw ContractError("encoder: expected " + std::to_string(backbone_proj->size()) + " backbone features, got " +
                            std::to_string(backbone_features.size()));
    }
    std::vector<torch::Tensor> projected;
    for (size_t i = 0; i < backbone_features.size(); ++i) {
        projected.push_back(backbone_proj[i]->as<torch::nn::Linear>()->forward(backbone_features[i]));
    }
    if (cfg_.iterative_refinement) {
        if (denoiser_features.size() != denoiser_proj->size()) {
            throw ContractError("encoder: expected " + std::to_string(denoiser_proj->size()) +
                                " denoiser features, got " + std::to_string(denoiser_features.size()));
        }
        for (size_t i = 0; i < denoiser_features.size(); ++i) {
            auto f = cfg_.detach_denoiser_features ? denoiser_features[i].detach() : denoiser_features[i];
            projected.push_back(denoiser_proj[i]->as<torch::nn::Linear>()->forward(f));
        }
    }
    auto pooled = torch::stack(projected, 0).mean(0);
    return out(torch::leaky_relu(pooled, cfg_.leaky_slope));
}

ConceptEmbedding compose_embedding(const torch::Tensor& offset, const torch::Tensor& domain_embedding, double s) {
    if (offset.size(-1) != domain_embedding.size(-1)) {
        throw ContractError("offset width " + std::to_string(offset.size(-1)) + " != embedding width " +
                            std::to_string(domain_embedding.size(-1)));
    }
    return {domain_embedding + s * offset, offset, domain_embedding, s};
}

torch::Tensor embedding_reg_loss(const torch::Tensor& offset) {
    if (offset.dim() <= 1) return offset.pow(2).sum();
    return offset.pow(2).flatten(1).sum(1).mean();
}

torch::Tensor substitute_placeholder(const torch::Tensor& tokens, const torch::Tensor& placeholder,
                                     const torch::Tensor& e_c) {
    const auto B = tokens.size(0), L = tokens.size(1);
    if (placeholder.numel() != B || e_c.size(0) != B || e_c.size(1) != tokens.size(2)) {
        throw ContractError("substitute_placeholder: batch or width mismatch");
    }
    auto pos = torch::arange(L, torch::kLong).unsqueeze(0);
    auto slot = (pos == placeholder.to(torch::kLong).view({B, 1})).unsqueeze(-1);  // [B, L, 1]
    return torch::where(slot, e_c.unsqueeze(1).expand_as(tokens), tokens);
}

}  // namespace dtune
