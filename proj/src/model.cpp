#include "dtune/model.hpp"

#include <cstring>
#include <set>
#include <sstream>

#include "dtune/errors.hpp"
#include "dtune/rng.hpp"

namespace dtune {

namespace {

const LayerDeltas* nonempty(const LayerDeltas* d) { return (d != nullptr && !d->empty()) ? d : nullptr; }

void freeze(torch::nn::Module& m) {
    for (auto& p : m.parameters()) p.set_requires_grad(false);
}

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& c) {
    const auto& d = c.denoiser;
    const auto& b = c.backbone;
    const auto& e = c.encoder;
    return {
        {"resolution", d.resolution},
        {"channels", d.channels},
        {"embed_dim", d.embed_dim},
        {"seq_len", d.seq_len},
        {"vocab_size", d.vocab_size},
        {"time_dim", d.time_dim},
        {"groups", d.groups},
        {"head_dim", d.head_dim},
        {"timesteps", d.timesteps},
        {"beta_start", c.beta_start},
        {"beta_end", c.beta_end},
        {"sampler_steps", c.sampler_steps},
        {"encoder",
         {{"width", e.width},
          {"leaky_slope", e.leaky_slope},
          {"scale", e.scale},
          {"iterative_refinement", e.iterative_refinement},
          {"detach_denoiser_features", e.detach_denoiser_features}}},
        {"offsets",
         {{"mode", offset_mode_name(c.offset_mode)},
          {"rank_dim", c.offsets.rank_dim},
          {"shared_v0", c.offsets.shared_v0},
          {"v0_std", c.offsets.v0_std}}},
        {"backbone",
         {{"widths", b.widths}, {"embed_dim", b.embed_dim}, {"n_classes", b.n_classes}, {"groups", b.groups}}},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    auto& d = c.denoiser;
    d.resolution = j.at("resolution").get<int>();
    d.channels = j.at("channels").get<std::vector<int>>();
    d.embed_dim = j.at("embed_dim").get<int>();
    d.seq_len = j.at("seq_len").get<int>();
    d.vocab_size = j.at("vocab_size").get<int>();
    d.time_dim = j.at("time_dim").get<int>();
    d.groups = j.at("groups").get<int>();
    d.head_dim = j.at("head_dim").get<int>();
    d.timesteps = j.at("timesteps").get<int>();
    c.beta_start = j.at("beta_start").get<double>();
    c.beta_end = j.at("beta_end").get<double>();
    c.sampler_steps = j.at("sampler_steps").get<int>();
    const auto& e = j.at("encoder");
    c.encoder.width = e.at("width").get<int>();
    c.encoder.leaky_slope = e.at("leaky_slope").get<double>();
    c.encoder.scale = e.at("scale").get<double>();
    c.encoder.iterative_refinement = e.at("iterative_refinement").get<bool>();
    c.encoder.detach_denoiser_features = e.at("detach_denoiser_features").get<bool>();
    const auto& o = j.at("offsets");
    c.offset_mode = offset_mode_from(o.at("mode").get<std::string>());
    c.offsets.rank_dim = o.at("rank_dim").get<int>();
    c.offsets.shared_v0 = o.at("shared_v0").get<bool>();
    c.offsets.v0_std = o.at("v0_std").get<double>();
    const auto& b = j.at("backbone");
    c.backbone.widths = b.at("widths").get<std::vector<int>>();
    c.backbone.embed_dim = b.at("embed_dim").get<int>();
    c.backbone.n_classes = b.at("n_classes").get<int>();
    c.backbone.groups = b.at("groups").get<int>();
    c.backbone.resolution = d.resolution;
    return c;
}

ConceptInput ConceptInput::expand(int64_t batch) const {
    if (image.size(0) == batch) return *this;
    if (image.size(0) != 1) throw ContractError("only a single concept image can be expanded to a batch");
    ConceptInput out;
    out.image = image.expand({batch, -1, -1, -1});
    for (const auto& t : taps) out.taps.push_back(t.expand({batch, -1}));
    out.aggregated = aggregated.expand({batch, -1});
    return out;
}

std::pair<torch::Tensor, torch::Tensor> prompt_tensors(int template_id, int64_t batch) {
    const auto& tpl = prompt_template(template_id);
    auto ids = torch::empty({1, kSeqLen}, torch::kLong);
    for (int i = 0; i < kSeqLen; ++i) ids[0][i] = tpl.token_ids[static_cast<size_t>(i)];
    return {ids.expand({batch, kSeqLen}).contiguous(), torch::full({batch}, tpl.placeholder_index, torch::kLong)};
}

DomainModel::DomainModel(const ModelConfig& cfg, std::uint64_t init_seed, const TensorMap* backbone_tensors)
    : cfg_(cfg), schedule_(NoiseSchedule::linear(cfg.denoiser.timesteps, cfg.beta_start, cfg.beta_end)) {
    cfg_.backbone.resolution = cfg.denoiser.resolution;
    torch::manual_seed(derive_seed(init_seed, "init"));
    denoiser = Denoiser(cfg_.denoiser);
    backbone = Backbone(cfg_.backbone);
    freeze(*backbone);
    backbone->eval();
    encoder = EncoderHead(backbone->tap_widths(), denoiser->pooled_feature_widths(), cfg_.denoiser.embed_dim,
                          cfg_.encoder);
    if (cfg_.offset_mode != OffsetMode::kNone) {
        offsets = OffsetSet(denoiser->attention_layer_shapes(), cfg_.offset_mode, cfg_.offsets,
                            backbone->aggregated_width());
    }
    if (backbone_tensors != nullptr) {
        std::vector<std::string> problems;
        torch::NoGradGuard no_grad;
        std::set<std::string> seen;
        for (auto& item : backbone->named_parameters(true)) {
            const std::string name = "backbone." + item.key();
            seen.insert(name);
            auto it = backbone_tensors->find(name);
            if (it == backbone_tensors->end()) {
                problems.push_back("missing " + name);
                continue;
            }
            auto src = from_host(it->second);
            if (!src.sizes().equals(item.value().sizes())) {
                problems.push_back("shape " + name);
                continue;
            }
            item.value().copy_(src);
        }
        for (const auto& [name, _] : *backbone_tensors) {
            if (!seen.count(name)) problems.push_back("extra " + name);
        }
        if (!problems.empty()) {
            std::ostringstream os;
            os << "backbone checkpoint does not match the configured backbone:";
            for (const auto& p : problems) os << ' ' << p;
            throw StructureError(os.str());
        }
    }
}

ConceptInput DomainModel::encode_concept(const torch::Tensor& image01) {
    ConceptInput c;
    c.image = image01.dim() == 3 ? image01.unsqueeze(0) : image01;
    c.image = c.image.to(dtype());
    c.taps = extract_backbone_features(backbone, c.image);
    c.aggregated = torch::cat(c.taps, 1);
    return c;
}

LayerDeltas DomainModel::deltas(const ConceptInput& concept_input) {
    if (!offsets) return {};
    return offsets->materialize_all(offsets->mode() == OffsetMode::kHyper ? concept_input.aggregated : torch::Tensor());
}

Conditioning DomainModel::condition(const ConceptInput& concept_input, const torch::Tensor& token_ids,
                                    const torch::Tensor& placeholder, const torch::Tensor& z, const torch::Tensor& t,
                                    const LayerDeltas* d) {
    std::vector<torch::Tensor> dn;
    if (cfg_.encoder.iterative_refinement) dn = denoiser->pooled_block_features(z, t, nonempty(d));
    auto offset = encoder->forward(concept_input.taps, dn);
    Conditioning c;
    c.embedding = compose_embedding(offset, denoiser->domain_embedding(), cfg_.encoder.scale);
    c.sequence = substitute_placeholder(denoiser->embed_tokens(token_ids), placeholder, c.embedding.e_c);
    return c;
}

torch::Tensor DomainModel::condition_with_embedding(const torch::Tensor& e_c, const torch::Tensor& token_ids,
                                                    const torch::Tensor& placeholder) {
    auto e = e_c.dim() == 1 ? e_c.unsqueeze(0).expand({token_ids.size(0), -1}) : e_c;
    return substitute_placeholder(denoiser->embed_tokens(token_ids), placeholder, e);
}

torch::Tensor DomainModel::predict(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& sequence,
                                   const LayerDeltas* d) {
    return denoiser->forward(z, t, sequence, nonempty(d));
}

LossTerms DomainModel::loss(const ConceptInput& concept_input, const torch::Tensor& token_ids,
                            const torch::Tensor& placeholder, const torch::Tensor& t, const torch::Tensor& eps,
                            const torch::Tensor& mask, double lambda_reg) {
    const auto x0 = concept_input.image * 2.0 - 1.0;
    auto z = noise_sample(schedule_, x0, t, eps);
    auto d = deltas(concept_input);
    auto c = condition(concept_input, token_ids, placeholder, z, t, &d);
    auto pred = predict(z, t, c.sequence, &d);
    LossTerms out;
    out.diffusion = masked_sq_error(eps, pred, mask);
    out.reg = embedding_reg_loss(c.embedding.offset);
    out.total = out.diffusion + lambda_reg * out.reg;
    return out;
}

CondProvider DomainModel::provider(const ConceptInput& concept_input, int template_id, const LayerDeltas* d,
                                   int t_stop, std::vector<ProviderRecord>* trace) {
    struct State {
        torch::Tensor frozen_sequence;
    };
    auto state = std::make_shared<State>();
    return [this, concept_input, template_id, d, t_stop, trace, state](int t, const torch::Tensor& z) {
        const auto B = z.size(0);
        auto [ids, slot] = prompt_tensors(template_id, B);
        if (state->frozen_sequence.defined()) {
            if (trace != nullptr) {
                auto rec = trace->back();
                rec.t = t;
                rec.frozen = true;
                trace->push_back(rec);
            }
            return state->frozen_sequence;
        }
        auto ci = concept_input.expand(B);
        auto tt = torch::full({B}, t, torch::kLong);
        auto c = condition(ci, ids, slot, z, tt, d);
        if (trace != nullptr) {
            ProviderRecord rec;
            rec.t = t;
            rec.offset_norm = c.embedding.offset[0].norm().item<double>();
            rec.distance = (c.embedding.e_c[0] - c.embedding.domain_embedding).norm().item<double>();
            trace->push_back(rec);
        }
        if (t_stop >= 0 && t <= t_stop) state->frozen_sequence = c.sequence;
        return c.sequence;
    };
}

torch::Tensor DomainModel::sample(const torch::Tensor& concept_image01, int template_id, std::uint64_t seed,
                                  int batch, int t_stop, std::vector<ProviderRecord>* trace) {
    torch::NoGradGuard no_grad;
    auto ci = encode_concept(concept_image01).expand(batch);
    auto d = deltas(ci);
    auto cond = provider(ci, template_id, &d, t_stop, trace);
    NoisePredictor predict_fn = [&](const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& c) {
        return predict(z, t, c, &d);
    };
    SamplerOptions opts;
    opts.steps = cfg_.sampler_steps;
    opts.seed = seed;
    opts.batch = batch;
    return dtune::sample(predict_fn, schedule_, cond, opts, cfg_.denoiser.resolution, dtype());
}

std::vector<std::pair<std::string, torch::Tensor>> DomainModel::named(bool include_backbone) const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& p : denoiser->named_parameters(true)) out.emplace_back("denoiser." + p.key(), p.value());
    for (const auto& b : denoiser->named_buffers(true)) out.emplace_back("denoiser." + b.key(), b.value());
    for (const auto& p : encoder->named_parameters(true)) out.emplace_back("encoder." + p.key(), p.value());
    if (offsets) {
        for (auto& nt : offsets->named_tensors()) out.push_back(std::move(nt));
    }
    if (include_backbone) {
        for (const auto& p : backbone->named_parameters(true)) out.emplace_back("backbone." + p.key(), p.value());
    }
    return out;
}

TensorMap DomainModel::export_tensors(bool include_backbone) const {
    TensorMap m;
    for (const auto& [name, t] : named(include_backbone)) m.emplace(name, to_host(t));
    return m;
}

TensorMap DomainModel::backbone_tensors() const {
    TensorMap m;
    for (const auto& p : backbone->named_parameters(true)) m.emplace("backbone." + p.key(), to_host(p.value()));
    return m;
}

void DomainModel::import_tensors(const TensorMap& tensors) {
    auto targets = named(false);
    std::vector<std::string> missing, extra, mismatched;
    std::set<std::string> known;
    for (const auto& [name, t] : targets) {
        known.insert(name);
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            missing.push_back(name);
        } else if (!std::equal(t.sizes().begin(), t.sizes().end(), it->second.shape.begin(), it->second.shape.end())) {
            mismatched.push_back(name);
        }
    }
    for (const auto& [name, _] : tensors) {
        if (module_of(name) != "backbone" && !known.count(name)) extra.push_back(name);
    }
    if (!missing.empty() || !extra.empty() || !mismatched.empty()) {
        std::ostringstream os;
        os << "checkpoint structure does not match the model:";
        auto list = [&](const char* label, const std::vector<std::string>& v) {
            if (v.empty()) return;
            os << ' ' << label << " [";
            for (size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
            os << ']';
        };
        list("missing", missing);
        list("extra", extra);
        list("shape", mismatched);
        throw StructureError(os.str());
    }
    torch::NoGradGuard no_grad;
    for (auto& [name, t] : targets) t.copy_(from_host(tensors.at(name)).to(t.scalar_type()));
}

std::vector<torch::Tensor> DomainModel::group_parameters(const std::string& group) {
    std::vector<torch::Tensor> out;
    if (group == "denoiser") {
        out = denoiser->parameters(true);
    } else if (group == "encoder") {
        out = encoder->parameters(true);
    } else if (group == "offsets") {
        if (offsets) {
            for (auto& [_, t] : offsets->named_tensors()) out.push_back(t);
        }
    } else if (group == "backbone") {
        out = backbone->parameters(true);
    } else {
        throw ContractError("unknown parameter group: " + group);
    }
    return out;
}

std::string DomainModel::group_hash(const std::string& group) const {
    return map_hash(export_tensors(group == "backbone"), group + ".");
}

std::unique_ptr<DomainModel> DomainModel::clone() const {
    const auto bb = backbone_tensors();
    auto copy = std::make_unique<DomainModel>(cfg_, 0, &bb);
    copy->import_tensors(export_tensors(false));
    if (dtype() != torch::kFloat32) copy->set_dtype(dtype());
    return copy;
}

void DomainModel::set_dtype(torch::ScalarType dtype) {
    denoiser->to(dtype);
    encoder->to(dtype);
    if (offsets) offsets->to(dtype);
    backbone->to(dtype);
}

HostTensor to_host(const torch::Tensor& t) {
    auto c = t.detach().to(torch::kFloat32).contiguous();
    HostTensor h;
    h.shape.assign(c.sizes().begin(), c.sizes().end());
    h.values.resize(static_cast<size_t>(c.numel()));
    if (c.numel() > 0) std::memcpy(h.values.data(), c.data_ptr<float>(), h.values.size() * sizeof(float));
    return h;
}

torch::Tensor from_host(const HostTensor& h) {
    auto t = torch::empty(h.shape, torch::kFloat32);
    if (!h.values.empty()) std::memcpy(t.data_ptr<float>(), h.values.data(), h.values.size() * sizeof(float));
    return t;
}

torch::Tensor image_to_tensor(const Image& img) {
    auto t = torch::empty({img.height, img.width, 3}, torch::kFloat32);
    std::memcpy(t.data_ptr<float>(), img.data.data(), img.data.size() * sizeof(float));
    return t.permute({2, 0, 1}).unsqueeze(0).contiguous();
}

Image tensor_to_image(const torch::Tensor& t) {
    auto x = t.dim() == 4 ? t[0] : t;
    if (x.dim() != 3 || x.size(0) != 3) throw ContractError("expected a [3, H, W] image tensor");
    auto hwc = x.detach().to(torch::kFloat32).clamp(0.0, 1.0).permute({1, 2, 0}).contiguous();
    Image img(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)));
    std::memcpy(img.data.data(), hwc.data_ptr<float>(), img.data.size() * sizeof(float));
    return img;
}

torch::Tensor mask_to_tensor(const Mask& mask) {
    auto t = torch::empty({1, 1, mask.height, mask.width}, torch::kFloat32);
    auto* p = t.data_ptr<float>();
    for (size_t i = 0; i < mask.data.size(); ++i) p[i] = mask.data[i] ? 1.0f : 0.0f;
    return t;
}

}  // namespace dtune
