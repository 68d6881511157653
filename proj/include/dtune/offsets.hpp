#pragma once

#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "dtune/diffusion.hpp"

namespace dtune {

/// How attention projections are modulated.
///  kRegularized: learned constant v0 pushed through four linear maps (default).
///  kDirect:      a free M x N offset per projection (ablation).
///  kHyper:       v0 predicted from the concept image's backbone features (ablation).
///  kNone:        no offsets at all (encoder-only ablation).
enum class OffsetMode { kRegularized, kDirect, kHyper, kNone };

const char* offset_mode_name(OffsetMode m);
OffsetMode offset_mode_from(const std::string& name);

struct OffsetOptions {
    int rank_dim = 64;  // length K of v0
    bool shared_v0 = false;
    double v0_std = 0.02;
};

/// Regularized offset for one M x N projection:
///   v_y = row_proj(v0) in R^M, v_x = col_proj(v0) in R^N,
///   dW  = ColRefine(RowRefine(v_y v_x^T)),
/// where RowRefine maps every row through an N x N affine map and ColRefine
/// maps every column through an M x M affine map. rank(dW) <= 3.
class OffsetSpecImpl : public torch::nn::Module {
public:
    OffsetSpecImpl(int rows, int cols, const OffsetOptions& opts, bool own_v0);

    /// `v0` is [K] (one matrix) or [B, K] (one matrix per sample). If undefined
    /// the spec's own constant is used.
    torch::Tensor materialize(const torch::Tensor& v0 = {});

    int rows() const { return rows_; }
    int cols() const { return cols_; }

    torch::Tensor v0;  // undefined when v0 is shared or predicted
    torch::nn::Linear row_proj{nullptr}, col_proj{nullptr}, row_refine{nullptr}, col_refine{nullptr};

private:
    int rows_;
    int cols_;
    int rank_dim_;
};
TORCH_MODULE(OffsetSpec);

/// Unregularized ablation: the offset itself is the parameter, zero at init.
class DirectOffsetImpl : public torch::nn::Module {
public:
    DirectOffsetImpl(int rows, int cols);
    torch::Tensor delta;
};
TORCH_MODULE(DirectOffset);

/// One offset generator per attention projection id, in the denoiser's order.
class OffsetSetImpl : public torch::nn::Module, public OffsetSource {
public:
    /// `hyper_feature_dim` is the width of the aggregated backbone descriptor;
    /// only used in kHyper mode.
    OffsetSetImpl(const std::vector<std::pair<std::string, std::vector<int64_t>>>& layer_shapes, OffsetMode mode,
                  const OffsetOptions& opts, int hyper_feature_dim = 0);

    std::vector<std::string> layer_ids() const override { return ids_; }
    LayerDeltas materialize_all(const torch::Tensor& concept_features) override;
    torch::Tensor materialize(const std::string& layer_id, const torch::Tensor& concept_features = {});

    OffsetMode mode() const { return mode_; }
    const OffsetOptions& options() const { return opts_; }

    /// Tensors under their checkpoint names ("offsets.<layer_id>.<param>").
    std::vector<std::pair<std::string, torch::Tensor>> named_tensors() const;

    OffsetSpec spec(const std::string& layer_id) const;

private:
    size_t index_of(const std::string& layer_id) const;
    torch::Tensor v0_for(const torch::Tensor& concept_features, size_t index);

    OffsetMode mode_;
    OffsetOptions opts_;
    std::vector<std::string> ids_;
    torch::nn::ModuleList specs{nullptr};
    torch::Tensor shared_v0_;
    torch::nn::Linear hyper{nullptr};
};
TORCH_MODULE(OffsetSet);

}  // namespace dtune
