#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "dsfwsi/ctfm.hpp"

using namespace dsfwsi;

TEST(FusionPlan, HalfOfSixteenMasked) {
    auto p = sample_fusion_plan(16, 0.5, 1);
    EXPECT_EQ(p.mask_set.size(), 8u);
    EXPECT_EQ(masked_slot_count(16, 0.5), 8);
}

TEST(FusionPlan, RatioZeroAndOne) {
    EXPECT_TRUE(sample_fusion_plan(16, 0.0, 2).mask_set.empty());
    EXPECT_EQ(sample_fusion_plan(16, 1.0, 2).mask_set.size(), 16u);
}

TEST(FusionPlan, InvalidArguments) {
    EXPECT_THROW(sample_fusion_plan(16, -0.1, 0), ArgumentError);
    EXPECT_THROW(sample_fusion_plan(16, 1.5, 0), ArgumentError);
    EXPECT_THROW(sample_fusion_plan(0, 0.5, 0), ArgumentError);
}

TEST(FusionPlan, PermutationIsBijectionAndDeterministic) {
    for (std::uint64_t s = 0; s < 50; ++s) {
        auto p = sample_fusion_plan(16, 0.5, s);
        auto sorted = p.permutation;
        std::sort(sorted.begin(), sorted.end());
        for (int i = 0; i < 16; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
        EXPECT_TRUE(std::is_sorted(p.mask_set.begin(), p.mask_set.end()));
        EXPECT_EQ(p, sample_fusion_plan(16, 0.5, s));
    }
    EXPECT_NE(sample_fusion_plan(16, 0.5, 1), sample_fusion_plan(16, 0.5, 2));
}

TEST(FusionPlan, AblationSwitches) {
    auto mask_only = sample_fusion_plan(16, 0.5, 4, /*shuffle=*/false, /*mask=*/true);
    for (int i = 0; i < 16; ++i) EXPECT_EQ(mask_only.permutation[static_cast<std::size_t>(i)], i);
    EXPECT_EQ(mask_only.mask_set.size(), 8u);
    auto jigsaw_only = sample_fusion_plan(16, 0.5, 4, /*shuffle=*/true, /*mask=*/false);
    EXPECT_TRUE(jigsaw_only.mask_set.empty());
}

TEST(Fuse, HandEvaluatedExample) {
    auto ctx = torch::tensor({9.0f, 8.0f});
    auto targets = torch::tensor({1.0f, 1.0f, 2.0f, 2.0f, 3.0f, 3.0f, 4.0f, 4.0f}).reshape({4, 2});
    FusionPlan plan;
    plan.m = 4;
    plan.permutation = {2, 0, 3, 1};
    plan.mask_set = {1};
    plan.mask_ratio = 0.25;
    auto out = fuse(ctx, targets, plan);
    auto expected = torch::tensor({9.0f, 8.0f, 3.0f, 3.0f, 0.0f, 0.0f, 4.0f, 4.0f, 2.0f, 2.0f});
    EXPECT_TRUE(torch::equal(out, expected)) << out;
}

TEST(Fuse, IdentityIsOrderedConcatenation) {
    auto ctx = torch::randn({3});
    auto targets = torch::randn({5, 3});
    auto out = fuse(ctx, targets, identity_plan(5));
    EXPECT_TRUE(torch::equal(out, torch::cat({ctx, targets.reshape({-1})})));
}

TEST(Fuse, OutputDimension) {
    auto out = fuse(torch::randn({64}), torch::randn({16, 64}), sample_fusion_plan(16, 0.5, 0));
    EXPECT_EQ(out.size(0), 1088);
}

TEST(Fuse, DimensionMismatch) {
    EXPECT_THROW(fuse(torch::randn({4}), torch::randn({16, 5}), identity_plan(16)), PreconditionError);
    EXPECT_THROW(fuse(torch::randn({4}), torch::randn({8, 4}), identity_plan(16)), PreconditionError);
}

TEST(Fuse, PropertiesOverManyPlans) {
    torch::manual_seed(0);
    const int m = 16, c = 6;
    for (std::uint64_t s = 0; s < 200; ++s) {
        auto ctx = torch::randn({c}) + 5.0;
        auto targets = torch::randn({m, c}) + 5.0;  // no accidental zeros
        auto plan = sample_fusion_plan(m, 0.5, s);
        auto out = fuse(ctx, targets, plan).reshape({m + 1, c});
        EXPECT_TRUE(torch::equal(out[0], ctx));
        int zero_slots = 0;
        std::multiset<std::vector<float>> got, want;
        for (int j = 0; j < m; ++j) {
            auto slot = out[j + 1].contiguous();
            if (plan.is_masked(j)) {
                EXPECT_TRUE(torch::equal(slot, torch::zeros({c})));
                ++zero_slots;
            } else {
                got.insert(std::vector<float>(slot.data_ptr<float>(), slot.data_ptr<float>() + c));
                auto src = targets[plan.permutation[static_cast<std::size_t>(j)]].contiguous();
                want.insert(std::vector<float>(src.data_ptr<float>(), src.data_ptr<float>() + c));
            }
        }
        EXPECT_EQ(zero_slots, 8);
        EXPECT_EQ(got, want);
    }
}

TEST(Fuse, RatioZeroIdentityIsInvertible) {
    auto ctx = torch::randn({4});
    auto targets = torch::randn({16, 4});
    auto out = fuse(ctx, targets, identity_plan(16));
    EXPECT_TRUE(torch::equal(out.slice(0, 0, 4), ctx));
    EXPECT_TRUE(torch::equal(out.slice(0, 4).reshape({16, 4}), targets));
}

TEST(Fuse, BatchMatchesRowwiseAndIsDifferentiable) {
    auto ctx = torch::randn({3, 5}, torch::requires_grad());
    auto targets = torch::randn({3, 4, 5}, torch::requires_grad());
    std::vector<FusionPlan> plans{sample_fusion_plan(4, 0.5, 1), sample_fusion_plan(4, 0.5, 2),
                                  sample_fusion_plan(4, 0.5, 3)};
    auto out = fuse_batch(ctx, targets, plans);
    ASSERT_EQ(out.sizes(), (std::vector<std::int64_t>{3, 25}));
    for (int b = 0; b < 3; ++b) EXPECT_TRUE(torch::equal(out[b], fuse(ctx[b], targets[b], plans[static_cast<std::size_t>(b)])));
    out.sum().backward();
    EXPECT_TRUE(torch::equal(ctx.grad(), torch::ones_like(ctx)));
    // masked targets receive no gradient, kept ones receive one
    EXPECT_EQ(targets.grad().sum().item<float>(), 3 * 2 * 5);
}
