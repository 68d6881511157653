#include "dtune/offsets.hpp"

#include <cmath>

#include "dtune/errors.hpp"

namespace dtune {

const char* offset_mode_name(OffsetMode m) {
    switch (m) {
        case OffsetMode::kRegularized: return "regularized";
        case OffsetMode::kDirect: return "direct";
        case OffsetMode::kHyper: return "hyper";
        case OffsetMode::kNone: return "none";
    }
    return "?";
}

OffsetMode offset_mode_from(const std::string& name) {
    if (name == "regularized") return OffsetMode::kRegularized;
    if (name == "direct") return OffsetMode::kDirect;
    if (name == "hyper") return OffsetMode::kHyper;
    if (name == "none") return OffsetMode::kNone;
    throw ContractError("unknown offset mode: " + name);
}

// Initialization keeps dW exactly zero while leaving every parameter on a
// gradient path: row_proj is random, col_proj is zero (so v_x = 0), and both
// refinements start as identities with zero bias.
OffsetSpecImpl::OffsetSpecImpl(int rows, int cols, const OffsetOptions& opts, bool own_v0)
    : rows_(rows), cols_(cols), rank_dim_(opts.rank_dim) {
    const int K = opts.rank_dim;
    if (own_v0) v0 = register_parameter("v0", torch::randn({K}) * opts.v0_std);
    row_proj = register_module("row_proj", torch::nn::Linear(K, rows));
    col_proj = register_module("col_proj", torch::nn::Linear(K, cols));
    row_refine = register_module("row_refine", torch::nn::Linear(cols, cols));
    col_refine = register_module("col_refine", torch::nn::Linear(rows, rows));

    torch::NoGradGuard no_grad;
    row_proj->weight.normal_(0.0, 1.0 / std::sqrt(static_cast<double>(K)));
    row_proj->bias.zero_();
    col_proj->weight.zero_();
    col_proj->bias.zero_();
    row_refine->weight.copy_(torch::eye(cols));
    row_refine->bias.zero_();
    col_refine->weight.copy_(torch::eye(rows));
    col_refine->bias.zero_();
}

torch::Tensor OffsetSpecImpl::materialize(const torch::Tensor& v0_in) {
    const torch::Tensor& base = v0_in.defined() ? v0_in : v0;
    if (!base.defined()) throw ContractError("offset spec has no v0 and none was supplied");
    if (base.size(-1) != rank_dim_) {
        throw ContractError("v0 length " + std::to_string(base.size(-1)) + " != " + std::to_string(rank_dim_));
    }
    auto vy = row_proj->forward(base);  // [.., M]
    auto vx = col_proj->forward(base);  // [.., N]
    auto outer = vy.unsqueeze(-1) * vx.unsqueeze(-2);                 // [.., M, N]
    auto rows = row_refine->forward(outer);                           // every row through N x N
    auto cols = col_refine->forward(rows.transpose(-1, -2)).transpose(-1, -2);  // every column through M x M
    return cols;
}

DirectOffsetImpl::DirectOffsetImpl(int rows, int cols) {
    delta = register_parameter("delta", torch::zeros({rows, cols}));
}

OffsetSetImpl::OffsetSetImpl(const std::vector<std::pair<std::string, std::vector<int64_t>>>& layer_shapes,
                             OffsetMode mode, const OffsetOptions& opts, int hyper_feature_dim)
    : mode_(mode), opts_(opts) {
    if (mode == OffsetMode::kNone) throw ContractError("an offset set cannot be built in mode 'none'");
    if (mode == OffsetMode::kHyper && hyper_feature_dim <= 0) {
        throw ContractError("hypernetwork offsets need a positive backbone feature width");
    }
    specs = register_module("specs", torch::nn::ModuleList());
    const bool own_v0 = mode == OffsetMode::kRegularized && !opts.shared_v0;
    for (const auto& [id, shape] : layer_shapes) {
        if (shape.size() != 2) throw ContractError("offset target " + id + " is not a matrix");
        ids_.push_back(id);
        const int M = static_cast<int>(shape[0]);
        const int N = static_cast<int>(shape[1]);
        if (mode == OffsetMode::kDirect) {
            specs->push_back(DirectOffset(M, N));
        } else {
            specs->push_back(OffsetSpec(M, N, opts, own_v0));
        }
    }
    if (mode == OffsetMode::kRegularized && opts.shared_v0) {
        shared_v0_ = register_parameter("shared_v0", torch::randn({opts.rank_dim}) * opts.v0_std);
    }
    if (mode == OffsetMode::kHyper) {
        hyper = register_module("hyper", torch::nn::Linear(hyper_feature_dim, opts.rank_dim));
        torch::NoGradGuard no_grad;
        hyper->weight.mul_(opts.v0_std * std::sqrt(static_cast<double>(hyper_feature_dim)));
        hyper->bias.zero_();
    }
}

size_t OffsetSetImpl::index_of(const std::string& layer_id) const {
    for (size_t i = 0; i < ids_.size(); ++i) {
        if (ids_[i] == layer_id) return i;
    }
    throw ContractError("no offset for layer id " + layer_id);
}

OffsetSpec OffsetSetImpl::spec(const std::string& layer_id) const {
    if (mode_ == OffsetMode::kDirect) throw ContractError("direct offsets have no regularizing spec");
    return OffsetSpec(std::dynamic_pointer_cast<OffsetSpecImpl>(specs->ptr(index_of(layer_id))));
}

torch::Tensor OffsetSetImpl::v0_for(const torch::Tensor& concept_features, size_t index) {
    switch (mode_) {
        case OffsetMode::kRegularized:
            return opts_.shared_v0 ? shared_v0_ : specs[index]->as<OffsetSpecImpl>()->v0;
        case OffsetMode::kHyper:
            if (!concept_features.defined()) {
                throw ContractError("hypernetwork offsets need the concept image's backbone features");
            }
            return hyper->forward(concept_features);
        default: return {};
    }
}

torch::Tensor OffsetSetImpl::materialize(const std::string& layer_id, const torch::Tensor& concept_features) {
    const size_t i = index_of(layer_id);
    if (mode_ == OffsetMode::kDirect) return specs[i]->as<DirectOffsetImpl>()->delta;
    return specs[i]->as<OffsetSpecImpl>()->materialize(v0_for(concept_features, i));
}

LayerDeltas OffsetSetImpl::materialize_all(const torch::Tensor& concept_features) {
    LayerDeltas out;
    torch::Tensor hyper_v0;
    if (mode_ == OffsetMode::kHyper) hyper_v0 = v0_for(concept_features, 0);
    for (size_t i = 0; i < ids_.size(); ++i) {
        if (mode_ == OffsetMode::kDirect) {
            out.emplace(ids_[i], specs[i]->as<DirectOffsetImpl>()->delta);
        } else if (mode_ == OffsetMode::kHyper) {
            out.emplace(ids_[i], specs[i]->as<OffsetSpecImpl>()->materialize(hyper_v0));
        } else {
            out.emplace(ids_[i], specs[i]->as<OffsetSpecImpl>()->materialize(v0_for({}, i)));
        }
    }
    return out;
}

std::vector<std::pair<std::string, torch::Tensor>> OffsetSetImpl::named_tensors() const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (size_t i = 0; i < ids_.size(); ++i) {
        for (const auto& p : specs.ptr()->ptr(i)->named_parameters(true)) {
            out.emplace_back("offsets." + ids_[i] + "." + p.key(), p.value());
        }
    }
    if (shared_v0_.defined()) out.emplace_back("offsets.shared.v0", shared_v0_);
    if (hyper) {
        out.emplace_back("offsets.hyper.weight", hyper->weight);
        out.emplace_back("offsets.hyper.bias", hyper->bias);
    }
    return out;
}

}  // namespace dtune
