#include "dtune/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dtune/errors.hpp"
#include "dtune/rng.hpp"

namespace dtune {

namespace {

std::vector<torch::Tensor> collect(DomainModel& m, const std::vector<std::string>& groups) {
    std::vector<torch::Tensor> out;
    for (const auto& g : groups) {
        for (auto& p : m.group_parameters(g)) out.push_back(p);
    }
    return out;
}

void set_trainable(DomainModel& m, const std::vector<std::string>& groups) {
    for (const char* g : {"denoiser", "encoder", "offsets"}) {
        const bool on = std::find(groups.begin(), groups.end(), g) != groups.end();
        for (auto& p : m.group_parameters(g)) p.set_requires_grad(on);
    }
}

torch::optim::Adam make_adam(const std::vector<torch::Tensor>& params, double lr) {
    return torch::optim::Adam(params, torch::optim::AdamOptions(lr).betas({0.9, 0.999}).weight_decay(0.0));
}

StepLoss record(int step, const LossTerms& l) {
    StepLoss s;
    s.step = step;
    s.total = l.total.item<double>();
    s.diffusion = l.diffusion.item<double>();
    s.reg = l.reg.item<double>();
    if (!std::isfinite(s.total) || !std::isfinite(s.diffusion) || !std::isfinite(s.reg)) {
        std::ostringstream os;
        os << "non-finite loss at step " << step << " (total=" << s.total << ", diffusion=" << s.diffusion
           << ", reg=" << s.reg << ")";
        throw NumericError(os.str());
    }
    return s;
}

torch::Tensor check_image(const torch::Tensor& image01, int resolution) {
    auto img = image01.dim() == 3 ? image01.unsqueeze(0) : image01;
    if (img.dim() != 4 || img.size(0) != 1 || img.size(1) != 3 || img.size(2) != resolution ||
        img.size(3) != resolution) {
        std::ostringstream os;
        os << "concept image must be [3, " << resolution << ", " << resolution << "], got " << image01.sizes();
        throw ContractError(os.str());
    }
    return img;
}

torch::Tensor check_mask(const torch::Tensor& mask, int resolution, int batch) {
    if (!mask.defined()) return {};
    auto m = mask.dim() == 2 ? mask.unsqueeze(0).unsqueeze(0) : (mask.dim() == 3 ? mask.unsqueeze(0) : mask);
    if (m.dim() != 4 || m.size(0) != 1 || m.size(1) != 1 || m.size(2) != resolution || m.size(3) != resolution) {
        std::ostringstream os;
        os << "loss mask must be [" << resolution << ", " << resolution << "], got " << mask.sizes();
        throw ContractError(os.str());
    }
    return m.expand({batch, 1, resolution, resolution});
}

}  // namespace

// ---------------------------------------------------------------------------

void AblationFlags::validate() const {
    const int scope = int(no_tuning) + int(tune_components_only) + int(tune_denoiser_only);
    if (scope > 1) {
        throw ValidationError("ablation", "no_tuning, tune_components_only and tune_denoiser_only are exclusive");
    }
    const int arch = int(direct_offsets) + int(encoder_only) + int(hypernetwork);
    if (arch > 1) throw ValidationError("ablation", "direct_offsets, encoder_only and hypernetwork are exclusive");
    if (encoder_only && (tune_components_only || tune_denoiser_only)) {
        throw ValidationError("ablation", "encoder_only already fixes the tuned scope");
    }
}

ModelConfig AblationFlags::apply(const ModelConfig& base) const {
    validate();
    ModelConfig c = base;
    if (direct_offsets) c.offset_mode = OffsetMode::kDirect;
    if (hypernetwork) c.offset_mode = OffsetMode::kHyper;
    if (encoder_only) c.offset_mode = OffsetMode::kNone;
    if (no_iterative_refinement) c.encoder.iterative_refinement = false;
    return c;
}

std::vector<std::string> AblationFlags::trained_groups() const {
    validate();
    if (no_tuning) return {};
    if (encoder_only) return {"encoder"};
    if (tune_components_only) return {"encoder", "offsets"};
    if (tune_denoiser_only) return {"denoiser"};
    return {"denoiser", "encoder", "offsets"};
}

const std::vector<std::string>& ablation_names() {
    static const std::vector<std::string> names{
        "no_tuning",       "tune_components_only", "tune_denoiser_only", "no_iterative_refinement",
        "no_embedding_reg", "direct_offsets",      "encoder_only",       "hypernetwork"};
    return names;
}

AblationFlags ablation_from_name(const std::string& name) {
    AblationFlags f;
    if (name == "full") return f;
    if (name == "no_tuning") f.no_tuning = true;
    else if (name == "tune_components_only") f.tune_components_only = true;
    else if (name == "tune_denoiser_only") f.tune_denoiser_only = true;
    else if (name == "no_iterative_refinement") f.no_iterative_refinement = true;
    else if (name == "no_embedding_reg") f.no_embedding_reg = true;
    else if (name == "direct_offsets") f.direct_offsets = true;
    else if (name == "encoder_only") f.encoder_only = true;
    else if (name == "hypernetwork") f.hypernetwork = true;
    else throw ValidationError("ablation", "unknown ablation flag: " + name);
    return f;
}

std::string ablation_label(const AblationFlags& f) {
    std::string out;
    const bool on[] = {f.no_tuning,        f.tune_components_only, f.tune_denoiser_only, f.no_iterative_refinement,
                       f.no_embedding_reg, f.direct_offsets,       f.encoder_only,       f.hypernetwork};
    for (size_t i = 0; i < ablation_names().size(); ++i) {
        if (!on[i]) continue;
        if (!out.empty()) out += "+";
        out += ablation_names()[i];
    }
    return out.empty() ? "full" : out;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepLoss>& trace) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os.precision(9);
    os << "step,total,diffusion,reg\n";
    for (const auto& s : trace) os << s.step << ',' << s.total << ',' << s.diffusion << ',' << s.reg << '\n';
}

torch::Tensor stack_images(const std::vector<DatasetItem>& items) {
    std::vector<torch::Tensor> ts;
    ts.reserve(items.size());
    for (const auto& it : items) ts.push_back(image_to_tensor(it.image));
    return torch::cat(ts, 0);
}

// ---------------------------------------------------------------------------

std::vector<StepLoss> pretrain(DomainModel& model, const std::vector<DatasetItem>& items, const PretrainConfig& cfg,
                               const std::function<void(const StepLoss&)>& progress) {
    if (items.empty()) throw ContractError("pretrain: empty dataset");
    if (cfg.batch_size < 1 || cfg.steps < 0) throw ContractError("pretrain: batch_size >= 1 and steps >= 0 required");
    const double lambda = cfg.flags.no_embedding_reg ? 0.0 : cfg.lambda_reg;
    const auto groups = cfg.flags.trained_groups();
    set_trainable(model, groups);
    auto params = collect(model, groups);
    std::vector<StepLoss> trace;
    if (params.empty()) return trace;

    const auto dtype = model.dtype();
    const auto images = stack_images(items).to(dtype);
    std::vector<int> templates;
    for (const auto& it : items) templates.push_back(it.record.template_id);
    auto opt = make_adam(params, cfg.effective_lr());
    const int T = model.schedule().steps;
    const auto data_seed = derive_seed(cfg.seed, "data");
    const auto noise_seed = derive_seed(cfg.seed, "noise");
    const int B = cfg.batch_size;

    for (int step = 0; step < cfg.steps; ++step) {
        Rng rng(derive_seed(data_seed, static_cast<std::uint64_t>(step)));
        std::vector<int64_t> idx(static_cast<size_t>(B));
        auto ids = torch::empty({B, kSeqLen}, torch::kLong);
        auto slot = torch::empty({B}, torch::kLong);
        for (int b = 0; b < B; ++b) {
            idx[static_cast<size_t>(b)] = static_cast<int64_t>(rng.below(items.size()));
            auto [tid, tslot] = prompt_tensors(templates[static_cast<size_t>(idx[static_cast<size_t>(b)])], 1);
            ids[b] = tid[0];
            slot[b] = tslot[0];
        }
        auto batch = images.index_select(0, torch::tensor(idx, torch::kLong));
        auto gen = make_generator(derive_seed(noise_seed, static_cast<std::uint64_t>(step)));
        auto t = torch::randint(0, T, {B}, gen, torch::TensorOptions().dtype(torch::kLong));
        auto eps = randn({B, 3, batch.size(2), batch.size(3)}, gen, dtype);

        opt.zero_grad();
        auto ci = model.encode_concept(batch);
        auto loss = model.loss(ci, ids, slot, t, eps, {}, lambda);
        auto rec = record(step, loss);
        loss.total.backward();
        opt.step();
        trace.push_back(rec);
        if (progress) progress(rec);
    }
    set_trainable(model, {"denoiser", "encoder", "offsets"});
    return trace;
}

// ---------------------------------------------------------------------------

PersonalizeConfig PersonalizeConfig::face_like() {
    PersonalizeConfig c;
    c.steps = 15;
    c.lambda_reg = 0.1;
    c.base_lr = 1e-6;
    return c;
}

PersonalizeConfig PersonalizeConfig::generic() {
    PersonalizeConfig c;
    c.steps = 5;
    c.lambda_reg = 1e-4;
    c.base_lr = 3e-6;
    return c;
}

TuningBatch build_tuning_batch(const torch::Tensor& image01, int batch, const NoiseSchedule& schedule,
                               std::uint64_t seed) {
    if (batch < 1) throw ContractError("tuning batch size must be >= 1");
    auto img = image01.dim() == 3 ? image01.unsqueeze(0) : image01;
    auto gen = make_generator(seed);
    const int T = schedule.steps;
    auto u = torch::rand({batch}, gen, torch::TensorOptions().dtype(torch::kFloat64));
    auto base = torch::arange(batch, torch::TensorOptions().dtype(torch::kFloat64));
    TuningBatch out;
    out.t = torch::floor((base + u) * (static_cast<double>(T) / batch)).to(torch::kLong).clamp(0, T - 1);
    out.eps = randn({batch, 3, img.size(2), img.size(3)}, gen, img.scalar_type());
    out.images = img.expand({batch, -1, -1, -1});
    return out;
}

std::string image_hash(const torch::Tensor& image01) {
    auto img = image01.dim() == 4 && image01.size(0) == 1 ? image01[0] : image01;
    return tensor_hash(to_host(img.to(torch::kFloat32)));
}

std::unique_ptr<DomainModel> model_for_flags(const DomainModel& pretrained, const AblationFlags& flags,
                                             std::uint64_t init_seed) {
    const ModelConfig cfg = flags.apply(pretrained.config());
    auto same = model_config_to_json(cfg) == model_config_to_json(pretrained.config());
    if (same) return pretrained.clone();
    const auto bb = pretrained.backbone_tensors();
    auto m = std::make_unique<DomainModel>(cfg, init_seed, &bb);
    auto fresh = m->export_tensors(false);
    const auto src = pretrained.export_tensors(false);
    for (auto& [name, t] : fresh) {
        auto it = src.find(name);
        if (it != src.end() && it->second.shape == t.shape) t = it->second;
    }
    m->import_tensors(fresh);
    if (pretrained.dtype() != torch::kFloat32) m->set_dtype(pretrained.dtype());
    return m;
}

PersonalizationResult personalize(const DomainModel& pretrained, const torch::Tensor& image01,
                                  const PersonalizeConfig& cfg, const torch::Tensor& mask,
                                  const StepCallback& callback) {
    const int res = pretrained.config().denoiser.resolution;
    auto img = check_image(image01, res).to(pretrained.dtype());
    auto m = check_mask(mask, res, cfg.batch_size);
    if (m.defined()) m = m.to(pretrained.dtype());
    PersonalizationResult out;
    out.image_hash = image_hash(img.to(torch::kFloat32));
    out.model = model_for_flags(pretrained, cfg.flags);
    const auto groups = cfg.flags.trained_groups();
    if (groups.empty() || cfg.steps <= 0) return out;

    auto& model = *out.model;
    set_trainable(model, groups);
    auto opt = make_adam(collect(model, groups), cfg.effective_lr());
    const double lambda = cfg.flags.no_embedding_reg ? 0.0 : cfg.lambda_reg;
    auto [ids, slot] = prompt_tensors(cfg.template_id, cfg.batch_size);
    const auto noise_seed = derive_seed(cfg.seed, "noise");
    auto ci = model.encode_concept(img).expand(cfg.batch_size);

    for (int step = 0; step < cfg.steps; ++step) {
        auto tb = build_tuning_batch(img, cfg.batch_size, model.schedule(),
                                     derive_seed(noise_seed, static_cast<std::uint64_t>(step)));
        opt.zero_grad();
        auto loss = model.loss(ci, ids, slot, tb.t, tb.eps, m, lambda);
        auto rec = record(step, loss);
        loss.total.backward();
        opt.step();
        out.trace.push_back(rec);
        if (callback && !callback(rec)) break;
    }
    out.steps = static_cast<int>(out.trace.size());
    set_trainable(model, {"denoiser", "encoder", "offsets"});
    return out;
}

PersonalizationResult baseline_embedding_only(const DomainModel& pretrained, const torch::Tensor& image01,
                                              int template_id, int steps, double effective_lr, std::uint64_t seed,
                                              const torch::Tensor& mask, const StepCallback& callback) {
    const int res = pretrained.config().denoiser.resolution;
    const int B = 16;
    auto img = check_image(image01, res).to(pretrained.dtype());
    auto m = check_mask(mask, res, B);
    if (m.defined()) m = m.to(pretrained.dtype());
    PersonalizationResult out;
    out.image_hash = image_hash(img.to(torch::kFloat32));
    out.model = pretrained.clone();
    auto& model = *out.model;
    set_trainable(model, {});

    auto embedding = model.denoiser->domain_embedding().detach().clone().set_requires_grad(true);
    auto opt = make_adam({embedding}, effective_lr);
    auto [ids, slot] = prompt_tensors(template_id, B);
    const auto noise_seed = derive_seed(seed, "noise");
    auto ci = model.encode_concept(img).expand(B);
    LayerDeltas d;
    {
        torch::NoGradGuard no_grad;
        d = model.deltas(ci);
    }
    for (int step = 0; step < steps; ++step) {
        auto tb = build_tuning_batch(img, B, model.schedule(), derive_seed(noise_seed, static_cast<std::uint64_t>(step)));
        opt.zero_grad();
        auto z = noise_sample(model.schedule(), tb.images * 2.0 - 1.0, tb.t, tb.eps);
        auto seq = model.condition_with_embedding(embedding, ids, slot);
        LossTerms loss;
        loss.diffusion = masked_sq_error(tb.eps, model.predict(z, tb.t, seq, &d), m);
        loss.reg = torch::zeros({}, loss.diffusion.options());
        loss.total = loss.diffusion;
        auto rec = record(step, loss);
        loss.total.backward();
        opt.step();
        out.trace.push_back(rec);
        if (callback && !callback(rec)) break;
    }
    out.steps = static_cast<int>(out.trace.size());
    out.embedding = embedding.detach();
    set_trainable(model, {"denoiser", "encoder", "offsets"});
    return out;
}

// ---------------------------------------------------------------------------

BackboneTrainResult train_backbone(const BackboneConfig& cfg, const BackboneTrainConfig& tcfg) {
    BackboneConfig bc = cfg;
    bc.n_classes = tcfg.n_identities;
    const auto manifest = plan_dataset(tcfg.n_identities, tcfg.images_per, derive_seed(tcfg.seed, "data"),
                                       bc.resolution);
    const auto items = render_items(manifest);
    const auto images = stack_images(items);
    std::vector<int64_t> labels;
    for (const auto& it : items) labels.push_back(it.record.identity_id);
    const auto y = torch::tensor(labels, torch::kLong);

    torch::manual_seed(derive_seed(tcfg.seed, "init"));
    BackboneTrainResult out;
    out.backbone = Backbone(bc);
    auto opt = torch::optim::Adam(out.backbone->parameters(), torch::optim::AdamOptions(tcfg.lr));
    const auto N = static_cast<int64_t>(items.size());
    auto gen = make_generator(derive_seed(tcfg.seed, "sampler"));
    for (int step = 0; step < tcfg.steps; ++step) {
        // cosine decay to zero
        const double lr = 0.5 * tcfg.lr * (1.0 + std::cos(M_PI * step / std::max(1, tcfg.steps)));
        for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
        auto idx = torch::randint(0, N, {tcfg.batch_size}, gen, torch::TensorOptions().dtype(torch::kLong));
        opt.zero_grad();
        auto logits = out.backbone->forward(images.index_select(0, idx)).logits;
        auto loss = torch::nn::functional::cross_entropy(logits, y.index_select(0, idx));
        loss.backward();
        opt.step();
        out.loss_trace.push_back(loss.item<double>());
    }
    torch::NoGradGuard no_grad;
    int64_t correct = 0;
    for (int64_t s = 0; s < N; s += 256) {
        const auto e = std::min<int64_t>(N, s + 256);
        auto pred = out.backbone->forward(images.slice(0, s, e)).logits.argmax(1);
        correct += pred.eq(y.slice(0, s, e)).sum().item<int64_t>();
    }
    out.train_accuracy = static_cast<double>(correct) / static_cast<double>(N);
    for (auto& p : out.backbone->parameters()) p.set_requires_grad(false);
    out.backbone->eval();
    return out;
}

}  // namespace dtune
