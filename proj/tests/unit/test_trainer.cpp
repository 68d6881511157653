#include <set>

#include <gtest/gtest.h>

#include "dtune/errors.hpp"
#include "dtune/trainer.hpp"
#include "test_util.hpp"

using namespace dtune;

namespace {

PersonalizeConfig quick(int steps = 3) {
    auto c = PersonalizeConfig::face_like();
    c.steps = steps;
    c.batch_size = 4;
    c.base_lr = 1e-4;
    c.seed = 5;
    return c;
}

std::vector<DatasetItem> tiny_items() { return render_items(plan_dataset(3, 2, 1)); }

}  // namespace

TEST(Config, LearningRatesAndPresets) {
    PersonalizeConfig p;
    p.base_lr = 1e-6;
    p.batch_size = 16;
    EXPECT_NEAR(p.effective_lr(), 1.6e-5, 1e-20);
    p.device_count = 2;
    EXPECT_NEAR(p.effective_lr(), 3.2e-5, 1e-20);
    EXPECT_DOUBLE_EQ(PretrainConfig{}.lambda_reg, 0.01);
    const auto f = PersonalizeConfig::face_like();
    EXPECT_EQ(f.steps, 15);
    EXPECT_DOUBLE_EQ(f.lambda_reg, 0.1);
    const auto g = PersonalizeConfig::generic();
    EXPECT_EQ(g.steps, 5);
    EXPECT_DOUBLE_EQ(g.lambda_reg, 1e-4);
    EXPECT_DOUBLE_EQ(g.base_lr, 3e-6);
}

TEST(TuningBatch, StratifiedDistinctTimesteps) {
    const auto s = NoiseSchedule::linear();
    auto img = test_util::concept_image();
    auto b = build_tuning_batch(img, 16, s, 3);
    ASSERT_EQ(b.t.size(0), 16);
    std::set<int64_t> ts;
    for (int i = 0; i < 16; ++i) {
        const auto t = b.t[i].item<int64_t>();
        ts.insert(t);
        EXPECT_GE(t, i * 200 / 16);
        EXPECT_LT(t, (i + 1) * 200.0 / 16);
        EXPECT_TRUE(torch::equal(b.images[i], img));
    }
    EXPECT_EQ(ts.size(), 16u);
    auto one = build_tuning_batch(img, 1, s, 4);
    EXPECT_EQ(one.t.size(0), 1);
    EXPECT_EQ(one.eps.sizes(), (std::vector<int64_t>{1, 3, 32, 32}));
    EXPECT_TRUE(torch::equal(build_tuning_batch(img, 8, s, 9).eps, build_tuning_batch(img, 8, s, 9).eps));
}

TEST(Ablation, NamesRoundTripAndExclusivity) {
    ASSERT_EQ(ablation_names().size(), 8u);
    for (const auto& n : ablation_names()) EXPECT_EQ(ablation_label(ablation_from_name(n)), n);
    EXPECT_EQ(ablation_label(ablation_from_name("full")), "full");
    EXPECT_THROW(ablation_from_name("bogus"), ValidationError);
    AblationFlags f;
    f.no_tuning = f.tune_denoiser_only = true;
    EXPECT_THROW(f.validate(), ValidationError);
    AblationFlags g;
    g.hypernetwork = g.direct_offsets = true;
    EXPECT_THROW(g.validate(), ValidationError);
}

TEST(Ablation, DeclaredScopes) {
    using G = std::vector<std::string>;
    EXPECT_EQ(ablation_from_name("no_tuning").trained_groups(), G{});
    EXPECT_EQ(ablation_from_name("encoder_only").trained_groups(), G{"encoder"});
    EXPECT_EQ(ablation_from_name("tune_denoiser_only").trained_groups(), G{"denoiser"});
    EXPECT_EQ(ablation_from_name("tune_components_only").trained_groups(), (G{"encoder", "offsets"}));
    EXPECT_EQ(ablation_from_name("full").trained_groups(), (G{"denoiser", "encoder", "offsets"}));
    const auto base = test_util::small_config();
    EXPECT_EQ(ablation_from_name("direct_offsets").apply(base).offset_mode, OffsetMode::kDirect);
    EXPECT_EQ(ablation_from_name("hypernetwork").apply(base).offset_mode, OffsetMode::kHyper);
    EXPECT_EQ(ablation_from_name("encoder_only").apply(base).offset_mode, OffsetMode::kNone);
    EXPECT_FALSE(ablation_from_name("no_iterative_refinement").apply(base).encoder.iterative_refinement);
}

TEST(Pretrain, DeterministicTraceAndDecomposition) {
    const auto items = tiny_items();
    PretrainConfig pc;
    pc.steps = 3;
    pc.batch_size = 2;
    pc.base_lr = 1e-4;
    pc.seed = 8;
    DomainModel a(test_util::small_config(), 1), b(test_util::small_config(), 1);
    const auto ta = pretrain(a, items, pc);
    const auto tb = pretrain(b, items, pc);
    ASSERT_EQ(ta.size(), 3u);
    for (size_t i = 0; i < ta.size(); ++i) {
        EXPECT_EQ(ta[i].total, tb[i].total);
        EXPECT_NEAR(ta[i].total, ta[i].diffusion + pc.lambda_reg * ta[i].reg, 1e-6 * ta[i].total);
    }
    EXPECT_EQ(a.group_hash("denoiser"), b.group_hash("denoiser"));
}

TEST(Pretrain, BackboneAndDomainEmbeddingStayFrozen) {
    DomainModel m(test_util::small_config(), 1);
    const auto bb = m.group_hash("backbone");
    const auto dom = m.denoiser->domain_embedding().clone();
    PretrainConfig pc;
    pc.steps = 2;
    pc.batch_size = 2;
    pc.base_lr = 1e-3;
    pretrain(m, tiny_items(), pc);
    EXPECT_EQ(m.group_hash("backbone"), bb);
    EXPECT_TRUE(torch::equal(m.denoiser->domain_embedding(), dom));
}

TEST(Pretrain, NonFiniteLossAborts) {
    DomainModel m(test_util::small_config(), 1);
    {
        torch::NoGradGuard ng;
        m.denoiser->named_parameters()["conv_out.bias"].fill_(std::numeric_limits<float>::quiet_NaN());
    }
    PretrainConfig pc;
    pc.steps = 2;
    pc.batch_size = 2;
    try {
        pretrain(m, tiny_items(), pc);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
    }
}

TEST(Personalize, NoTuningReturnsInput) {
    DomainModel m(test_util::small_config(), 3);
    auto cfg = quick();
    cfg.flags.no_tuning = true;
    auto r = personalize(m, test_util::concept_image(), cfg);
    EXPECT_EQ(r.steps, 0);
    EXPECT_TRUE(r.trace.empty());
    for (const char* g : {"denoiser", "encoder", "offsets"}) EXPECT_EQ(r.model->group_hash(g), m.group_hash(g));
}

TEST(Personalize, TraceLengthDeterminismAndDecomposition) {
    DomainModel m(test_util::small_config(), 3);
    auto img = test_util::concept_image(1);
    auto a = personalize(m, img, quick(4));
    auto b = personalize(m, img, quick(4));
    ASSERT_EQ(a.trace.size(), 4u);
    EXPECT_EQ(a.steps, 4);
    for (size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(a.trace[i].total, b.trace[i].total);
        EXPECT_NEAR(a.trace[i].total, a.trace[i].diffusion + 0.1 * a.trace[i].reg, 1e-6 * a.trace[i].total);
    }
    EXPECT_EQ(a.image_hash, image_hash(img));
    EXPECT_EQ(a.model->group_hash("backbone"), m.group_hash("backbone"));
    EXPECT_NE(a.model->group_hash("denoiser"), m.group_hash("denoiser"));
}

TEST(Personalize, AllOnesMaskMatchesNoMask) {
    DomainModel m(test_util::small_config(), 3);
    auto img = test_util::concept_image(2);
    auto a = personalize(m, img, quick(2));
    auto b = personalize(m, img, quick(2), torch::ones({1, 1, 32, 32}));
    for (size_t i = 0; i < a.trace.size(); ++i) EXPECT_NEAR(a.trace[i].diffusion, b.trace[i].diffusion, 1e-6 * a.trace[i].diffusion);
}

TEST(Personalize, ContractErrors) {
    DomainModel m(test_util::small_config(), 3);
    auto img = test_util::concept_image();
    EXPECT_THROW(personalize(m, img, quick(1), torch::ones({1, 1, 16, 16})), ContractError);
    EXPECT_THROW(personalize(m, torch::rand({3, 64, 64}), quick(1)), ContractError);
}

TEST(Personalize, CallbackStopsEarly) {
    DomainModel m(test_util::small_config(), 3);
    auto r = personalize(m, test_util::concept_image(), quick(10), {}, [](const StepLoss& s) { return s.step < 2; });
    EXPECT_EQ(r.steps, 3);
}

TEST(Personalize, EveryAblationMatchesItsScope) {
    DomainModel m(test_util::small_config(), 6);
    auto img = test_util::concept_image(3);
    for (const auto& name : ablation_names()) {
        auto flags = ablation_from_name(name);
        auto cfg = quick(2);
        cfg.flags = flags;
        auto before = model_for_flags(m, flags);
        auto r = personalize(m, img, cfg);
        const auto want = flags.trained_groups();
        for (const char* g : {"denoiser", "encoder", "offsets"}) {
            const bool trained = std::find(want.begin(), want.end(), g) != want.end();
            const bool moved = before->group_hash(g) != r.model->group_hash(g);
            EXPECT_EQ(trained, moved) << name << " / " << g;
        }
        EXPECT_EQ(r.model->group_hash("backbone"), m.group_hash("backbone")) << name;
    }
}

TEST(Baseline, ZeroStepsAndDeterminism) {
    DomainModel m(test_util::small_config(), 3);
    auto img = test_util::concept_image();
    auto z = baseline_embedding_only(m, img, 0, 0, 1e-3, 1);
    EXPECT_TRUE(torch::equal(z.embedding, m.denoiser->domain_embedding()));
    auto a = baseline_embedding_only(m, img, 0, 3, 1e-3, 1);
    auto b = baseline_embedding_only(m, img, 0, 3, 1e-3, 1);
    ASSERT_EQ(a.trace.size(), 3u);
    for (size_t i = 0; i < 3; ++i) EXPECT_EQ(a.trace[i].diffusion, b.trace[i].diffusion);
    EXPECT_FALSE(torch::equal(a.embedding, m.denoiser->domain_embedding()));
    for (const char* g : {"denoiser", "encoder", "offsets"}) EXPECT_EQ(a.model->group_hash(g), m.group_hash(g));
}

TEST(Baseline, SharesTheFirstStepNoiseWithPersonalize) {
    // With an untrained encoder head (zero offset) both methods start from the
    // domain embedding, so their first losses coincide.
    DomainModel m(test_util::small_config(), 3);
    auto img = test_util::concept_image(4);
    auto cfg = quick(1);
    cfg.batch_size = 16;
    auto p = personalize(m, img, cfg);
    auto b = baseline_embedding_only(m, img, cfg.template_id, 1, cfg.effective_lr(), cfg.seed);
    EXPECT_NEAR(p.trace[0].diffusion, b.trace[0].diffusion, 1e-4 * b.trace[0].diffusion);
}

TEST(LossCsv, Header) {
    test_util::TempDir d;
    write_loss_csv(d.path / "l.csv", {{0, 3.0, 2.0, 10.0}});
    EXPECT_EQ(test_util::slurp(d.path / "l.csv").substr(0, 25), "step,total,diffusion,reg\n");
}
