#include "dtune/diffusion.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "dtune/errors.hpp"

namespace dtune {

namespace {

torch::Tensor gather_scale(const std::vector<double>& table, const torch::Tensor& t, torch::ScalarType dtype,
                           bool noise) {
    auto tc = t.to(torch::kLong).contiguous();
    const int64_t n = tc.numel();
    std::vector<double> vals(static_cast<size_t>(n));
    const int64_t* p = tc.data_ptr<int64_t>();
    for (int64_t i = 0; i < n; ++i) {
        if (p[i] < 0 || p[i] >= static_cast<int64_t>(table.size())) {
            throw RangeError("timestep " + std::to_string(p[i]) + " outside [0, " + std::to_string(table.size()) + ")");
        }
        const double ab = table[static_cast<size_t>(p[i])];
        vals[static_cast<size_t>(i)] = noise ? std::sqrt(1.0 - ab) : std::sqrt(ab);
    }
    return torch::tensor(vals, torch::kFloat64).to(dtype).view({n, 1, 1, 1});
}

torch::Tensor sinusoid(const torch::Tensor& t, int dim, torch::ScalarType dtype) {
    const int half = dim / 2;
    auto freqs = torch::exp(torch::arange(half, torch::TensorOptions().dtype(dtype)) * (-std::log(10000.0) / half));
    auto args = t.to(dtype).unsqueeze(1) * freqs.unsqueeze(0);
    return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

constexpr int kSinusoidDim = 64;

}  // namespace

// ---------------------------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 2) throw ContractError("schedule needs at least 2 steps");
    NoiseSchedule s;
    s.steps = steps;
    s.betas.resize(static_cast<size_t>(steps));
    s.alphas_bar.resize(static_cast<size_t>(steps));
    double prod = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double b = beta_start + (beta_end - beta_start) * i / (steps - 1);
        s.betas[static_cast<size_t>(i)] = b;
        prod *= 1.0 - b;
        s.alphas_bar[static_cast<size_t>(i)] = prod;
    }
    return s;
}

torch::Tensor NoiseSchedule::signal_scale(const torch::Tensor& t, torch::ScalarType dtype) const {
    return gather_scale(alphas_bar, t, dtype, false);
}

torch::Tensor NoiseSchedule::noise_scale(const torch::Tensor& t, torch::ScalarType dtype) const {
    return gather_scale(alphas_bar, t, dtype, true);
}

torch::Tensor noise_sample(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                           const torch::Tensor& eps) {
    if (!x0.sizes().equals(eps.sizes())) throw ContractError("noise_sample: eps shape differs from x0");
    if (x0.dim() != 4 || t.numel() != x0.size(0)) throw ContractError("noise_sample: expected [B,C,H,W] and [B] timesteps");
    const auto dtype = x0.scalar_type();
    return schedule.signal_scale(t, dtype) * x0 + schedule.noise_scale(t, dtype) * eps;
}

torch::Tensor modulate(const torch::Tensor& w0, const torch::Tensor& delta) {
    const auto wd = w0.dim();
    const auto dd = delta.dim();
    const bool ok = (dd == wd && w0.sizes().equals(delta.sizes())) ||
                    (dd == wd + 1 && delta.sizes().slice(1).equals(w0.sizes()));
    if (!ok) {
        std::ostringstream os;
        os << "modulate: shape mismatch " << w0.sizes() << " vs " << delta.sizes();
        throw ContractError(os.str());
    }
    return w0 * (1 + delta);
}

torch::Generator make_generator(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

torch::Tensor randn(torch::IntArrayRef shape, torch::Generator& gen, torch::ScalarType dtype) {
    // Drawn in float32 so float and double runs see the same noise.
    return torch::randn(shape, gen, torch::TensorOptions().dtype(torch::kFloat32)).to(dtype);
}

// ---------------------------------------------------------------------------

ProjectionImpl::ProjectionImpl(int in_features, int out_features) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    weight = register_parameter("weight", torch::empty({out_features, in_features}).uniform_(-bound, bound));
}

torch::Tensor ProjectionImpl::forward(const torch::Tensor& x, const torch::Tensor& delta) {
    if (!delta.defined()) return torch::matmul(x, weight.t());
    const auto w = modulate(weight, delta);
    return torch::matmul(x, w.transpose(-1, -2));
}

AttentionImpl::AttentionImpl(std::string layer_prefix, int channels, int context_dim, int groups, int head_dim)
    : prefix_(std::move(layer_prefix)), cross_(context_dim > 0), heads_(std::max(1, channels / head_dim)) {
    const int kv_in = cross_ ? context_dim : channels;
    norm = register_module("norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, channels)));
    q = register_module("q", Projection(channels, channels));
    k = register_module("k", Projection(kv_in, channels));
    v = register_module("v", Projection(kv_in, channels));
    o = register_module("o", torch::nn::Linear(channels, channels));
}

std::vector<std::string> AttentionImpl::layer_ids() const { return {prefix_ + ".q", prefix_ + ".k", prefix_ + ".v"}; }

Projection AttentionImpl::proj(char which) const {
    switch (which) {
        case 'q': return q;
        case 'k': return k;
        case 'v': return v;
        default: throw ContractError(std::string("unknown projection '") + which + "'");
    }
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context, const LayerDeltas* deltas) {
    const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    auto h = norm(x).flatten(2).transpose(1, 2);  // [B, HW, C]
    const auto& ctx = cross_ ? context : h;
    if (cross_ && (!context.defined() || context.dim() != 3)) throw ContractError(prefix_ + ": missing conditioning");

    auto pick = [&](const char* suffix) -> torch::Tensor {
        if (deltas == nullptr) return {};
        auto it = deltas->find(prefix_ + suffix);
        return it == deltas->end() ? torch::Tensor() : it->second;
    };
    auto qh = q(h, pick(".q"));
    auto kh = k(ctx, pick(".k"));
    auto vh = v(ctx, pick(".v"));

    const int64_t hd = C / heads_;
    auto split = [&](const torch::Tensor& t) { return t.view({B, t.size(1), heads_, hd}).transpose(1, 2); };
    auto attn = torch::softmax(torch::matmul(split(qh), split(kh).transpose(-1, -2)) / std::sqrt(static_cast<double>(hd)), -1);
    auto out = torch::matmul(attn, split(vh)).transpose(1, 2).reshape({B, H * W, C});
    out = o(out).transpose(1, 2).reshape({B, C, H, W});
    return x + out;
}

ResBlockImpl::ResBlockImpl(int in_ch, int out_ch, int time_dim, int groups) {
    norm1 = register_module("norm1", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, in_ch)));
    conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)));
    time_proj = register_module("time_proj", torch::nn::Linear(time_dim, out_ch));
    norm2 = register_module("norm2", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, out_ch)));
    conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)));
    if (in_ch != out_ch) {
        skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 1)));
    }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
    auto h = conv1(torch::silu(norm1(x)));
    h = h + time_proj(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2(torch::silu(norm2(h)));
    return (skip ? skip(x) : x) + h;
}

UNetBlockImpl::UNetBlockImpl(const std::string& prefix, int in_ch, int out_ch, bool self_attention,
                             const DenoiserConfig& cfg) {
    res = register_module("res", ResBlock(in_ch, out_ch, cfg.time_dim, cfg.groups));
    if (self_attention) {
        self_attn = register_module("self", Attention(prefix + ".self", out_ch, 0, cfg.groups, cfg.head_dim));
    }
    cross_attn = register_module("cross", Attention(prefix + ".cross", out_ch, cfg.embed_dim, cfg.groups, cfg.head_dim));
}

torch::Tensor UNetBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb, const torch::Tensor& context,
                                     const LayerDeltas* deltas, bool skip_cross) {
    auto h = res(x, temb);
    if (self_attn) h = self_attn(h, torch::Tensor(), deltas);
    if (!skip_cross) h = cross_attn(h, context, deltas);
    return h;
}

std::vector<Attention> UNetBlockImpl::attentions() const {
    std::vector<Attention> out;
    if (self_attn) out.push_back(self_attn);
    out.push_back(cross_attn);
    return out;
}

MidBlockImpl::MidBlockImpl(int ch, const DenoiserConfig& cfg) {
    res1 = register_module("res1", ResBlock(ch, ch, cfg.time_dim, cfg.groups));
    self_attn = register_module("self", Attention("mid.self", ch, 0, cfg.groups, cfg.head_dim));
    cross_attn = register_module("cross", Attention("mid.cross", ch, cfg.embed_dim, cfg.groups, cfg.head_dim));
    res2 = register_module("res2", ResBlock(ch, ch, cfg.time_dim, cfg.groups));
}

torch::Tensor MidBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb, const torch::Tensor& context,
                                    const LayerDeltas* deltas, bool skip_cross) {
    auto h = res1(x, temb);
    h = self_attn(h, torch::Tensor(), deltas);
    if (!skip_cross) h = cross_attn(h, context, deltas);
    return res2(h, temb);
}

std::vector<Attention> MidBlockImpl::attentions() const { return {self_attn, cross_attn}; }

// ---------------------------------------------------------------------------

DenoiserImpl::DenoiserImpl(const DenoiserConfig& cfg) : cfg_(cfg) {
    const int D = static_cast<int>(cfg.channels.size());
    if (D < 2) throw ContractError("denoiser needs at least two resolution levels");
    if (cfg.resolution % (1 << (D - 1)) != 0) throw ContractError("resolution not divisible by the U-Net depth");

    tokens = register_module("tokens", torch::nn::Embedding(cfg.vocab_size, cfg.embed_dim));
    domain_embedding_ = register_buffer("domain_embedding", torch::randn({cfg.embed_dim}));
    time1 = register_module("time1", torch::nn::Linear(kSinusoidDim, cfg.time_dim));
    time2 = register_module("time2", torch::nn::Linear(cfg.time_dim, cfg.time_dim));
    conv_in = register_module("conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, cfg.channels[0], 3).padding(1)));

    down = register_module("down", torch::nn::ModuleList());
    downsample = register_module("downsample", torch::nn::ModuleList());
    int prev = cfg.channels[0];
    for (int i = 0; i < D; ++i) {
        const int ch = cfg.channels[static_cast<size_t>(i)];
        down->push_back(UNetBlock("down." + std::to_string(i), prev, ch, i >= D - 2, cfg));
        if (i < D - 1) {
            downsample->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
        }
        prev = ch;
    }
    mid = register_module("mid", MidBlock(prev, cfg));

    up = register_module("up", torch::nn::ModuleList());
    upsample = register_module("upsample", torch::nn::ModuleList());
    for (int i = 0; i < D; ++i) {
        const int ch = cfg.channels[static_cast<size_t>(i)];
        const int below = (i == D - 1) ? cfg.channels.back() : cfg.channels[static_cast<size_t>(i + 1)];
        up->push_back(UNetBlock("up." + std::to_string(i), below + ch, ch, i >= D - 2, cfg));
        if (i >= 1) {
            upsample->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).padding(1)));
        }
    }
    norm_out = register_module("norm_out", torch::nn::GroupNorm(torch::nn::GroupNormOptions(cfg.groups, cfg.channels[0])));
    conv_out = register_module("conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.channels[0], 3, 3).padding(1)));
}

torch::Tensor DenoiserImpl::time_embedding(const torch::Tensor& t) {
    auto e = sinusoid(t, kSinusoidDim, time1->weight.scalar_type());
    return time2(torch::silu(time1(e)));
}

torch::Tensor DenoiserImpl::embed_tokens(const torch::Tensor& ids) { return tokens(ids.to(torch::kLong)); }

torch::Tensor DenoiserImpl::run(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& cond,
                                const LayerDeltas* deltas) {
    if (z.dim() != 4 || z.size(1) != 3 || z.size(2) != cfg_.resolution || z.size(3) != cfg_.resolution) {
        std::ostringstream os;
        os << "denoiser input must be [B, 3, " << cfg_.resolution << ", " << cfg_.resolution << "], got " << z.sizes();
        throw ContractError(os.str());
    }
    if (t.numel() != z.size(0)) throw ContractError("denoiser: one timestep per batch element required");
    if (cond.dim() != 3 || cond.size(1) != cfg_.seq_len || cond.size(2) != cfg_.embed_dim) {
        std::ostringstream os;
        os << "conditioning must be [B, " << cfg_.seq_len << ", " << cfg_.embed_dim << "], got " << cond.sizes();
        throw ContractError(os.str());
    }
    if (cond.size(0) != z.size(0)) throw ContractError("conditioning batch differs from image batch");

    const int D = static_cast<int>(cfg_.channels.size());
    auto temb = time_embedding(t);
    auto h = conv_in(z);
    std::vector<torch::Tensor> skips;
    for (int i = 0; i < D; ++i) {
        h = down[static_cast<size_t>(i)]->as<UNetBlock>()->forward(h, temb, cond, deltas, false);
        skips.push_back(h);
        if (i < D - 1) h = downsample[static_cast<size_t>(i)]->as<torch::nn::Conv2d>()->forward(h);
    }
    h = mid(h, temb, cond, deltas, false);
    for (int i = D - 1; i >= 0; --i) {
        h = torch::cat({h, skips[static_cast<size_t>(i)]}, 1);
        h = up[static_cast<size_t>(i)]->as<UNetBlock>()->forward(h, temb, cond, deltas, false);
        if (i >= 1) {
            h = torch::upsample_nearest2d(h, std::vector<int64_t>{h.size(2) * 2, h.size(3) * 2});
            h = upsample[static_cast<size_t>(i - 1)]->as<torch::nn::Conv2d>()->forward(h);
        }
    }
    return conv_out(torch::silu(norm_out(h)));
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& cond,
                                    const LayerDeltas* deltas) {
    if (deltas == nullptr && attached_) {
        LayerDeltas local = attached_->materialize_all({});
        return run(z, t, cond, &local);
    }
    return run(z, t, cond, deltas);
}

std::vector<torch::Tensor> DenoiserImpl::pooled_block_features(const torch::Tensor& z, const torch::Tensor& t,
                                                               const LayerDeltas* deltas) {
    LayerDeltas local;
    if (deltas == nullptr && attached_) {
        local = attached_->materialize_all({});
        deltas = &local;
    }
    if (z.dim() != 4 || z.size(2) != cfg_.resolution) throw ContractError("pooled_block_features: bad input shape");
    const int D = static_cast<int>(cfg_.channels.size());
    auto temb = time_embedding(t);
    auto h = conv_in(z);
    std::vector<torch::Tensor> pooled;
    for (int i = 0; i < D; ++i) {
        h = down[static_cast<size_t>(i)]->as<UNetBlock>()->forward(h, temb, torch::Tensor(), deltas, true);
        pooled.push_back(h.mean({2, 3}));
        if (i < D - 1) h = downsample[static_cast<size_t>(i)]->as<torch::nn::Conv2d>()->forward(h);
    }
    h = mid(h, temb, torch::Tensor(), deltas, true);
    pooled.push_back(h.mean({2, 3}));
    return pooled;
}

std::vector<int> DenoiserImpl::pooled_feature_widths() const {
    std::vector<int> w(cfg_.channels.begin(), cfg_.channels.end());
    w.push_back(cfg_.channels.back());
    return w;
}

std::vector<Attention> DenoiserImpl::all_attentions() const {
    std::vector<Attention> out;
    for (const auto& m : *down) {
        for (auto& a : m->as<UNetBlock>()->attentions()) out.push_back(a);
    }
    for (auto& a : mid->attentions()) out.push_back(a);
    for (const auto& m : *up) {
        for (auto& a : m->as<UNetBlock>()->attentions()) out.push_back(a);
    }
    return out;
}

std::vector<std::string> DenoiserImpl::attention_layer_ids() const {
    std::vector<std::string> ids;
    for (const auto& a : all_attentions()) {
        for (auto& id : a->layer_ids()) ids.push_back(id);
    }
    return ids;
}

std::vector<std::pair<std::string, std::vector<int64_t>>> DenoiserImpl::attention_layer_shapes() const {
    std::vector<std::pair<std::string, std::vector<int64_t>>> out;
    for (const auto& a : all_attentions()) {
        for (char c : {'q', 'k', 'v'}) {
            const auto& w = a->proj(c)->weight;
            out.emplace_back(a->prefix() + "." + c, std::vector<int64_t>{w.size(0), w.size(1)});
        }
    }
    return out;
}

torch::Tensor& DenoiserImpl::projection_weight(const std::string& layer_id) {
    for (const auto& a : all_attentions()) {
        if (layer_id.size() == a->prefix().size() + 2 && layer_id.compare(0, a->prefix().size(), a->prefix()) == 0) {
            return a->proj(layer_id.back())->weight;
        }
    }
    throw ContractError("unknown attention layer id: " + layer_id);
}

void DenoiserImpl::attach(std::shared_ptr<OffsetSource> offsets) {
    if (!offsets) throw ContractError("attach: null offset source");
    if (attached_) throw ContractError("attach: offsets already attached (double modulation)");
    const auto expected_v = attention_layer_ids();
    const auto given_v = offsets->layer_ids();
    const std::set<std::string> expected(expected_v.begin(), expected_v.end());
    const std::set<std::string> given(given_v.begin(), given_v.end());
    std::vector<std::string> missing, extra;
    for (const auto& id : expected) {
        if (!given.count(id)) missing.push_back(id);
    }
    for (const auto& id : given) {
        if (!expected.count(id)) extra.push_back(id);
    }
    if (given.size() != given_v.size()) extra.push_back("<duplicate ids>");
    if (!missing.empty() || !extra.empty()) {
        std::ostringstream os;
        os << "attach: offset layer ids do not match the denoiser;";
        if (!missing.empty()) {
            os << " missing:";
            for (const auto& m : missing) os << ' ' << m;
        }
        if (!extra.empty()) {
            os << " extra:";
            for (const auto& e : extra) os << ' ' << e;
        }
        throw ContractError(os.str());
    }
    attached_ = std::move(offsets);
}

void DenoiserImpl::detach() { attached_.reset(); }

// ---------------------------------------------------------------------------

std::vector<int> sampler_timesteps(const NoiseSchedule& schedule, int steps) {
    if (steps < 1 || steps > schedule.steps) {
        throw RangeError("sampler steps must be in [1, " + std::to_string(schedule.steps) + "]");
    }
    std::vector<int> ts;
    const int stride = schedule.steps / steps;
    for (int k = steps - 1; k >= 0; --k) ts.push_back(k * stride);
    return ts;
}

torch::Tensor sample(const NoisePredictor& predict, const NoiseSchedule& schedule, const CondProvider& cond,
                     const SamplerOptions& opts, int resolution, torch::ScalarType dtype) {
    torch::NoGradGuard no_grad;
    auto gen = make_generator(opts.seed);
    auto z = randn({opts.batch, 3, resolution, resolution}, gen, dtype);
    const auto ts = sampler_timesteps(schedule, opts.steps);
    for (size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k];
        const double ab = schedule.alphas_bar[static_cast<size_t>(t)];
        const double ab_prev = (k + 1 < ts.size()) ? schedule.alphas_bar[static_cast<size_t>(ts[k + 1])] : 1.0;
        auto c = cond(t, z);
        auto tt = torch::full({opts.batch}, t, torch::kLong);
        auto eps = predict(z, tt, c);
        auto x0 = ((z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab)).clamp(-1.0, 1.0);
        z = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
    }
    return ((z + 1.0) * 0.5).clamp(0.0, 1.0);
}

torch::Tensor sample(Denoiser& model, const NoiseSchedule& schedule, const CondProvider& cond,
                     const SamplerOptions& opts, const LayerDeltas* deltas) {
    LayerDeltas local;
    if (deltas == nullptr && model->attached()) {
        torch::NoGradGuard no_grad;
        local = model->attached_source()->materialize_all({});
        deltas = &local;
    }
    NoisePredictor predict = [&](const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& c) {
        return model->forward(z, t, c, deltas);
    };
    return sample(predict, schedule, cond, opts, model->config().resolution, model->dtype());
}

torch::Tensor masked_sq_error(const torch::Tensor& eps, const torch::Tensor& pred, const torch::Tensor& mask) {
    if (!eps.sizes().equals(pred.sizes())) throw ContractError("prediction shape differs from noise shape");
    auto d = (eps - pred).pow(2);
    if (mask.defined()) {
        if (mask.dim() != 4 || mask.size(0) != d.size(0) || mask.size(2) != d.size(2) || mask.size(3) != d.size(3)) {
            throw ContractError("loss mask must be [B, 1, H, W] matching the image batch");
        }
        d = d * mask.to(d.scalar_type());
    }
    return d.flatten(1).sum(1).mean();
}

torch::Tensor diffusion_loss(const NoisePredictor& predict, const torch::Tensor& x0, const torch::Tensor& cond,
                             const NoiseSchedule& schedule, torch::Generator& gen) {
    if (x0.size(0) == 0) throw ContractError("diffusion_loss: empty batch");
    auto t = torch::randint(0, schedule.steps, {x0.size(0)}, gen, torch::TensorOptions().dtype(torch::kLong));
    auto eps = randn(x0.sizes(), gen, x0.scalar_type());
    auto z = noise_sample(schedule, x0, t, eps);
    return masked_sq_error(eps, predict(z, t, cond));
}

}  // namespace dtune
