#include <cmath>

#include <gtest/gtest.h>

#include "dtune/diffusion.hpp"
#include "dtune/errors.hpp"
#include "dtune/offsets.hpp"
#include "test_util.hpp"

using namespace dtune;

namespace {

DenoiserConfig small_denoiser() { return test_util::small_config().denoiser; }

struct Fixture {
    Denoiser model;
    NoiseSchedule schedule = NoiseSchedule::linear();
    torch::Tensor z, t, cond;

    Fixture() : model(small_denoiser()) {
        torch::manual_seed(3);
        z = torch::randn({2, 3, 32, 32});
        t = torch::tensor({10, 150}, torch::kLong);
        cond = torch::randn({2, 8, small_denoiser().embed_dim});
    }
};

}  // namespace

TEST(Schedule, Shape) {
    const auto s = NoiseSchedule::linear(200, 1e-4, 0.07);
    ASSERT_EQ(s.alphas_bar.size(), 200u);
    EXPECT_NEAR(s.alphas_bar[0], 0.9999, 1e-12);
    EXPECT_LT(s.alphas_bar.back(), 1e-3);
    for (size_t i = 1; i < s.alphas_bar.size(); ++i) EXPECT_LT(s.alphas_bar[i], s.alphas_bar[i - 1]);
}

TEST(NoiseSample, ZeroNoiseScalesSignal) {
    const auto s = NoiseSchedule::linear();
    auto x0 = torch::randn({1, 3, 4, 4}, torch::kFloat64);
    auto t = torch::tensor({37}, torch::kLong);
    auto z = noise_sample(s, x0, t, torch::zeros_like(x0));
    EXPECT_TRUE(torch::allclose(z, std::sqrt(s.alphas_bar[37]) * x0, 0, 1e-12));
}

TEST(NoiseSample, ZeroSignalScalesNoise) {
    const auto s = NoiseSchedule::linear();
    auto e = torch::randn({1, 3, 4, 4}, torch::kFloat64);
    auto z = noise_sample(s, torch::zeros_like(e), torch::tensor({120}, torch::kLong), e);
    EXPECT_TRUE(torch::allclose(z, std::sqrt(1.0 - s.alphas_bar[120]) * e, 0, 1e-12));
}

TEST(NoiseSample, FirstStepNearlyClean) {
    const auto s = NoiseSchedule::linear();
    auto x0 = torch::rand({1, 3, 8, 8}, torch::kFloat64) * 2 - 1;
    x0 = x0.sign() * (x0.abs() * 0.5 + 0.5);  // unit scale, away from zero
    auto eps = torch::randn_like(x0);
    auto z = noise_sample(s, x0, torch::tensor({0}, torch::kLong), eps);
    // sqrt(1 - ab[0]) = 0.01, so the perturbation is about a hundredth of eps.
    EXPECT_LT(((z - x0).abs() - 0.01 * eps.abs()).max().item<double>(), 1e-4);
}

TEST(NoiseSample, MarginalVariance) {
    const auto s = NoiseSchedule::linear();
    auto gen = make_generator(11);
    for (int tv : {5, 60, 199}) {
        auto eps = randn({100000, 1, 1, 1}, gen, torch::kFloat64);
        auto z = noise_sample(s, torch::zeros_like(eps), torch::full({100000}, tv, torch::kLong), eps);
        const double want = 1.0 - s.alphas_bar[tv];
        EXPECT_NEAR(z.var().item<double>() / want, 1.0, 0.03) << "t=" << tv;
    }
}

TEST(NoiseSample, TimestepOutOfRange) {
    const auto s = NoiseSchedule::linear();
    auto x0 = torch::zeros({1, 3, 2, 2});
    EXPECT_THROW(noise_sample(s, x0, torch::tensor({200}, torch::kLong), x0), RangeError);
    EXPECT_THROW(noise_sample(s, x0, torch::tensor({-1}, torch::kLong), x0), RangeError);
}

TEST(Modulate, Identities) {
    auto w0 = torch::randn({5, 7}, torch::kFloat64);
    EXPECT_TRUE(torch::equal(modulate(w0, torch::zeros_like(w0)), w0));
    EXPECT_TRUE(torch::equal(modulate(w0, -torch::ones_like(w0)), torch::zeros_like(w0)));
    auto ones = torch::ones({3, 3});
    auto d = torch::zeros({3, 3});
    d[1][2] = 0.5;
    auto w = modulate(ones, d);
    auto expect = ones.clone();
    expect[1][2] = 1.5;
    EXPECT_TRUE(torch::equal(w, expect));
    EXPECT_THROW(modulate(w0, torch::zeros({7, 5})), ContractError);
}

TEST(Denoiser, OutputShapeAndDeterminism) {
    Fixture f;
    torch::NoGradGuard ng;
    auto a = f.model->forward(f.z, f.t, f.cond);
    auto b = f.model->forward(f.z, f.t, f.cond);
    EXPECT_EQ(a.sizes(), f.z.sizes());
    EXPECT_TRUE(torch::equal(a, b));
}

TEST(Denoiser, ConditioningMatters) {
    Fixture f;
    torch::NoGradGuard ng;
    auto a = f.model->forward(f.z, f.t, f.cond);
    auto c2 = f.cond.clone();
    c2.select(1, 3).add_(1.0);
    auto b = f.model->forward(f.z, f.t, c2);
    EXPECT_GT((a - b).norm().item<double>(), 0.0);
}

TEST(Denoiser, WrongConditioningLength) {
    Fixture f;
    EXPECT_THROW(f.model->forward(f.z, f.t, torch::randn({2, 5, small_denoiser().embed_dim})), ContractError);
}

TEST(Denoiser, LayerIdsAreStable) {
    Fixture f;
    const auto ids = f.model->attention_layer_ids();
    // 3 down + mid + 3 up blocks with cross-attention, self-attention at the
    // two coarsest levels of each path and in the middle: 12 attention layers.
    EXPECT_EQ(ids.size(), 12u * 3u);
    for (const char* want : {"down.0.cross.q", "down.1.self.v", "mid.cross.k", "mid.self.q", "up.2.self.k", "up.0.cross.v"}) {
        EXPECT_NE(std::find(ids.begin(), ids.end(), want), ids.end()) << want;
    }
    EXPECT_EQ(std::find(ids.begin(), ids.end(), "down.0.self.q"), ids.end());
}

TEST(Denoiser, ZeroOffsetsMatchUnmodulated) {
    Fixture f;
    torch::NoGradGuard ng;
    auto plain = f.model->forward(f.z, f.t, f.cond);
    OffsetOptions opts;
    opts.rank_dim = 8;
    auto set = OffsetSet(f.model->attention_layer_shapes(), OffsetMode::kRegularized, opts);
    f.model->attach(set.ptr());
    auto mod = f.model->forward(f.z, f.t, f.cond);
    EXPECT_LE((plain - mod).abs().max().item<double>(), 1e-6);
}

TEST(Denoiser, AttachContracts) {
    Fixture f;
    OffsetOptions opts;
    opts.rank_dim = 4;
    auto set = OffsetSet(f.model->attention_layer_shapes(), OffsetMode::kDirect, opts);
    f.model->attach(set.ptr());
    EXPECT_THROW(f.model->attach(set.ptr()), ContractError);
    f.model->detach();

    auto shapes = f.model->attention_layer_shapes();
    shapes.pop_back();
    auto partial = OffsetSet(shapes, OffsetMode::kDirect, opts);
    try {
        f.model->attach(partial.ptr());
        FAIL() << "expected ContractError";
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find(f.model->attention_layer_shapes().back().first), std::string::npos);
    }
}

TEST(Denoiser, DetachRestoresBitExactly) {
    Fixture f;
    torch::NoGradGuard ng;
    auto before = f.model->forward(f.z, f.t, f.cond);
    OffsetOptions opts;
    auto set = OffsetSet(f.model->attention_layer_shapes(), OffsetMode::kDirect, opts);
    for (auto& p : set->parameters()) p.uniform_(-0.5, 0.5);
    f.model->attach(set.ptr());
    auto during = f.model->forward(f.z, f.t, f.cond);
    f.model->detach();
    auto after = f.model->forward(f.z, f.t, f.cond);
    EXPECT_GT((before - during).abs().max().item<double>(), 0.0);
    EXPECT_TRUE(torch::equal(before, after));
}

TEST(PooledFeatures, CountWidthsAndLocality) {
    Fixture f;
    torch::NoGradGuard ng;
    auto c = torch::full({1, 3, 32, 32}, 0.3);
    auto t = torch::tensor({50}, torch::kLong);
    auto feats = f.model->pooled_block_features(c, t);
    const auto widths = f.model->pooled_feature_widths();
    ASSERT_EQ(feats.size(), 4u);
    for (size_t i = 0; i < feats.size(); ++i) {
        EXPECT_EQ(feats[i].size(1), widths[i]);
        EXPECT_TRUE(torch::isfinite(feats[i]).all().item<bool>());
    }
    auto c2 = c.clone();
    c2[0][1][3][29] = -0.8;
    auto feats2 = f.model->pooled_block_features(c2, t);
    EXPECT_GT((feats.back() - feats2.back()).abs().max().item<double>(), 0.0);
}

TEST(Loss, PerfectAndZeroPredictors) {
    const auto s = NoiseSchedule::linear();
    auto x0 = torch::rand({8, 3, 32, 32}, torch::kFloat64) * 2 - 1;
    auto cond = torch::zeros({8, 8, 4}, torch::kFloat64);
    // the predictor recovers eps from z and t exactly
    NoisePredictor oracle = [&](const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor&) {
        return (z - s.signal_scale(t, torch::kFloat64) * x0) / s.noise_scale(t, torch::kFloat64);
    };
    auto gen = make_generator(1);
    EXPECT_LT(diffusion_loss(oracle, x0, cond, s, gen).item<double>(), 1e-12);

    NoisePredictor zero = [](const torch::Tensor& z, const torch::Tensor&, const torch::Tensor&) { return torch::zeros_like(z); };
    double acc = 0.0;
    for (int i = 0; i < 8; ++i) {
        const double l = diffusion_loss(zero, x0, cond, s, gen).item<double>();
        EXPECT_GE(l, 0.0);
        acc += l / 8;
    }
    EXPECT_NEAR(acc / (3 * 32 * 32), 1.0, 0.05);
}

TEST(Loss, AllOnesMaskEqualsNoMask) {
    auto eps = torch::randn({4, 3, 8, 8});
    auto pred = torch::randn({4, 3, 8, 8});
    auto a = masked_sq_error(eps, pred).item<double>();
    auto b = masked_sq_error(eps, pred, torch::ones({4, 1, 8, 8})).item<double>();
    EXPECT_NEAR(a, b, 1e-6 * a);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
    Fixture f;
    f.model->to(torch::kFloat64);
    const auto s = NoiseSchedule::linear();
    auto x0 = torch::rand({2, 3, 32, 32}, torch::kFloat64) * 2 - 1;
    auto cond = f.cond.to(torch::kFloat64);
    auto gen0 = make_generator(5);
    auto t = torch::randint(0, 200, {2}, gen0, torch::kLong);
    auto eps = randn({2, 3, 32, 32}, gen0, torch::kFloat64);
    auto loss_fn = [&] {
        auto z = noise_sample(s, x0, t, eps);
        return masked_sq_error(eps, f.model->forward(z, t, cond));
    };
    auto params = f.model->named_parameters();
    f.model->zero_grad();
    loss_fn().backward();
    torch::manual_seed(9);
    int checked = 0;
    for (const char* name : {"conv_in.weight", "mid.cross.q.weight", "up.0.res.conv1.weight", "time2.bias"}) {
        auto* p = params.find(name);
        ASSERT_NE(p, nullptr) << name;
        auto flat = p->view(-1);
        const auto idx = torch::randint(0, flat.numel(), {1}).item<int64_t>();
        const double analytic = p->grad().view(-1)[idx].item<double>();
        const double h = 1e-5;
        torch::NoGradGuard ng;
        const double orig = flat[idx].item<double>();
        flat[idx] = orig + h;
        const double up = loss_fn().item<double>();
        flat[idx] = orig - h;
        const double down = loss_fn().item<double>();
        flat[idx] = orig;
        const double numeric = (up - down) / (2 * h);
        EXPECT_LE(std::abs(analytic - numeric), 1e-3 * std::max({std::abs(analytic), std::abs(numeric), 1e-6})) << name;
        ++checked;
    }
    EXPECT_EQ(checked, 4);
}

TEST(Sampler, TimestepsAndProviderCalls) {
    Fixture f;
    const auto ts = sampler_timesteps(f.schedule, 50);
    ASSERT_EQ(ts.size(), 50u);
    EXPECT_EQ(ts.front(), 196);
    EXPECT_EQ(ts.back(), 0);
    EXPECT_THROW(sampler_timesteps(f.schedule, 201), RangeError);

    int calls = 0;
    auto cond = f.cond.slice(0, 0, 1);
    CondProvider p = [&](int, const torch::Tensor& z) {
        ++calls;
        EXPECT_EQ(z.size(0), 1);
        return cond;
    };
    torch::NoGradGuard ng;
    SamplerOptions o;
    o.steps = 5;
    auto img = sample(f.model, f.schedule, p, o);
    EXPECT_EQ(calls, 5);
    EXPECT_GE(img.min().item<double>(), 0.0);
    EXPECT_LE(img.max().item<double>(), 1.0);
}

TEST(Sampler, SeedDeterminismAndConditioningSensitivity) {
    Fixture f;
    torch::NoGradGuard ng;
    SamplerOptions o;
    o.steps = 5;
    o.seed = 42;
    auto c1 = f.cond.slice(0, 0, 1);
    auto c2 = f.cond.slice(0, 1, 2);
    auto a = sample(f.model, f.schedule, [&](int, const torch::Tensor&) { return c1; }, o);
    auto b = sample(f.model, f.schedule, [&](int, const torch::Tensor&) { return c1; }, o);
    auto c = sample(f.model, f.schedule, [&](int, const torch::Tensor&) { return c2; }, o);
    EXPECT_TRUE(torch::equal(a, b));
    EXPECT_GT((a - c).norm().item<double>(), 0.0);
}
