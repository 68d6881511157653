#include <gtest/gtest.h>

#include "dtune/encoder.hpp"
#include "dtune/errors.hpp"
#include "dtune/model.hpp"
#include "test_util.hpp"

using namespace dtune;

namespace {

BackboneConfig small_backbone() { return test_util::small_config().backbone; }

}  // namespace

TEST(Backbone, ThreeTapsAndPurity) {
    Backbone b(small_backbone());
    b->eval();
    torch::NoGradGuard ng;
    auto img = test_util::concept_image().unsqueeze(0);
    auto a = extract_backbone_features(b, img);
    auto c = extract_backbone_features(b, img);
    ASSERT_EQ(a.size(), 3u);
    const auto widths = b->tap_widths();
    for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].size(1), widths[i]);
        EXPECT_TRUE(torch::equal(a[i], c[i]));
    }
    EXPECT_EQ(b->aggregated_width(), widths[0] + widths[1] + widths[2]);
    EXPECT_THROW(extract_backbone_features(b, torch::rand({1, 3, 64, 64})), ContractError);
}

TEST(EncoderHead, ZeroFinalLayerGivesZeroOffset) {
    EncoderHead h(std::vector<int>{4, 8, 8}, std::vector<int>{8, 16, 16, 16}, 16, EncoderConfig{});
    std::vector<torch::Tensor> bf{torch::randn({2, 4}), torch::randn({2, 8}), torch::randn({2, 8})};
    std::vector<torch::Tensor> df{torch::randn({2, 8}), torch::randn({2, 16}), torch::randn({2, 16}), torch::randn({2, 16})};
    auto off = h->forward(bf, df);
    EXPECT_EQ(off.sizes(), (std::vector<int64_t>{2, 16}));
    EXPECT_TRUE(torch::equal(off, torch::zeros_like(off)));
}

TEST(EncoderHead, DeterministicAndBiasGradient) {
    EncoderHead h(std::vector<int>{4, 8, 8}, std::vector<int>{8, 16, 16, 16}, 16, EncoderConfig{});
    h->to(torch::kFloat64);
    {
        torch::NoGradGuard ng;
        h->final_layer()->weight.normal_();
        h->final_layer()->bias.normal_();
    }
    std::vector<torch::Tensor> bf{torch::randn({1, 4}, torch::kFloat64), torch::randn({1, 8}, torch::kFloat64),
                                  torch::randn({1, 8}, torch::kFloat64)};
    std::vector<torch::Tensor> df{torch::randn({1, 8}, torch::kFloat64), torch::randn({1, 16}, torch::kFloat64),
                                  torch::randn({1, 16}, torch::kFloat64), torch::randn({1, 16}, torch::kFloat64)};
    auto a = h->forward(bf, df);
    EXPECT_TRUE(torch::equal(a, h->forward(bf, df)));
    embedding_reg_loss(a).backward();
    EXPECT_TRUE(torch::allclose(h->final_layer()->bias.grad(), 2.0 * a.detach()[0], 1e-12, 1e-12));
}

TEST(EncoderHead, DenoiserFeaturesIgnoredWithoutRefinement) {
    EncoderConfig cfg;
    cfg.iterative_refinement = false;
    EncoderHead h(std::vector<int>{4}, std::vector<int>{8}, 6, cfg);
    torch::NoGradGuard ng;
    h->final_layer()->weight.normal_();
    std::vector<torch::Tensor> bf{torch::randn({1, 4})};
    EXPECT_TRUE(torch::equal(h->forward(bf, {torch::randn({1, 8})}), h->forward(bf, {torch::randn({1, 8})})));
}

TEST(Compose, OffsetScalingCases) {
    auto dom = torch::randn({16}, torch::kFloat64);
    auto zero = compose_embedding(torch::zeros({16}, torch::kFloat64), dom, 0.1);
    EXPECT_TRUE(torch::equal(zero.e_c, dom));
    auto off = torch::randn({16}, torch::kFloat64);
    EXPECT_TRUE(torch::equal(compose_embedding(off, dom, 0.0).e_c, dom));
    auto three = off / off.norm() * 3.0;
    auto c = compose_embedding(three, dom, 0.1);
    EXPECT_NEAR((c.e_c - dom).norm().item<double>(), 0.3, 1e-12);
    EXPECT_DOUBLE_EQ(c.scale, 0.1);
    EXPECT_TRUE(torch::equal(c.offset, three));
    EXPECT_TRUE(torch::equal(c.domain_embedding, dom));
}

TEST(RegLoss, Cases) {
    EXPECT_EQ(embedding_reg_loss(torch::zeros({8}, torch::kFloat64)).item<double>(), 0.0);
    auto unit = torch::zeros({8}, torch::kFloat64);
    unit[5] = 1.0;
    EXPECT_DOUBLE_EQ(embedding_reg_loss(unit).item<double>(), 1.0);
    auto v = torch::zeros({8}, torch::kFloat64);
    v[0] = 1.0;
    v[1] = 2.0;
    v[2] = 2.0;
    EXPECT_DOUBLE_EQ(embedding_reg_loss(v).item<double>(), 9.0);
}

TEST(Substitute, OnlyThePlaceholderChanges) {
    auto tokens = torch::randn({2, 8, 6});
    auto slot = torch::tensor({3, 0}, torch::kLong);
    auto e = torch::randn({2, 6});
    auto out = substitute_placeholder(tokens, slot, e);
    for (int b = 0; b < 2; ++b) {
        const int s = b == 0 ? 3 : 0;
        for (int i = 0; i < 8; ++i) {
            if (i == s) EXPECT_TRUE(torch::equal(out[b][i], e[b]));
            else EXPECT_TRUE(torch::equal(out[b][i], tokens[b][i]));
        }
    }
}

TEST(Provider, DeterministicAndSubstitutesOnlyTheSlot) {
    DomainModel m(test_util::small_config(), 4);
    torch::NoGradGuard ng;
    {
        m.encoder->final_layer()->weight.normal_(0.0, 0.5);
    }
    auto ci = m.encode_concept(test_util::concept_image());
    auto d = m.deltas(ci);
    auto p = m.provider(ci, 1, &d);
    auto z = torch::randn({1, 3, 32, 32});
    auto a = p(150, z);
    auto b = p(150, z);
    EXPECT_TRUE(torch::equal(a, b));
    const auto& tpl = prompt_template(1);
    auto ids = torch::tensor(std::vector<int64_t>(tpl.token_ids.begin(), tpl.token_ids.end())).unsqueeze(0);
    auto plain = m.denoiser->embed_tokens(ids);
    for (int i = 0; i < kSeqLen; ++i) {
        if (i == tpl.placeholder_index) continue;
        EXPECT_TRUE(torch::equal(a[0][i], plain[0][i])) << i;
    }
    auto c = p(5, torch::randn({1, 3, 32, 32}));
    EXPECT_GT((a[0][tpl.placeholder_index] - c[0][tpl.placeholder_index]).norm().item<double>(), 0.0);
}

TEST(Provider, DistanceIsScaledOffsetNormForRandomOffsets) {
    DomainModel m(test_util::small_config(), 2);
    m.set_dtype(torch::kFloat64);
    const double s = m.config().encoder.scale;
    const auto& dom = m.denoiser->domain_embedding();
    torch::manual_seed(0);
    for (int i = 0; i < 200; ++i) {
        auto off = torch::randn({16}, torch::kFloat64) * (0.1 + i);
        auto c = compose_embedding(off, dom, s);
        const double dist = (c.e_c - dom).norm().item<double>();
        EXPECT_NEAR(dist, s * off.norm().item<double>(), 1e-9 * dist);
        const double reg = embedding_reg_loss(off).item<double>();
        const double n2 = off.pow(2).sum().item<double>();
        EXPECT_NEAR(reg, n2, 1e-9 * n2);
    }
}
