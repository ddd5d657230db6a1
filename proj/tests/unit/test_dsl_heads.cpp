#include <gtest/gtest.h>

#include <cmath>

#include "dsfwsi/dsl_heads.hpp"

using namespace dsfwsi;

namespace {

double scalar(const torch::Tensor& t) { return t.item<double>(); }

torch::Tensor vec(std::initializer_list<double> v) { return torch::tensor(std::vector<double>(v), torch::kDouble); }

double brute_neg_cosine(const std::vector<double>& p, const std::vector<double>& z) {
    double dot = 0, np = 0, nz = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        dot += p[i] * z[i];
        np += p[i] * p[i];
        nz += z[i] * z[i];
    }
    return -dot / (std::sqrt(np) * std::sqrt(nz));
}

std::vector<double> to_vec(const torch::Tensor& t) {
    auto c = t.contiguous().to(torch::kDouble);
    return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
}

}  // namespace

TEST(NegCosine, Examples) {
    EXPECT_NEAR(scalar(neg_cosine(vec({1, 2, 3}), vec({1, 2, 3}))), -1.0, 1e-12);
    EXPECT_NEAR(scalar(neg_cosine(vec({1, 0}), vec({0, 1}))), 0.0, 1e-12);
    EXPECT_NEAR(scalar(neg_cosine(vec({1, 0}), vec({1, 1}))), -std::sqrt(2.0) / 2.0, 1e-9);
}

TEST(NegCosine, ScaleInvariant) {
    torch::manual_seed(1);
    auto p = torch::randn({4, 8}, torch::kDouble), z = torch::randn({4, 8}, torch::kDouble);
    EXPECT_NEAR(scalar(neg_cosine(3.5 * p, 0.2 * z)), scalar(neg_cosine(p, z)), 1e-6);
}

TEST(NegCosine, ZeroNormIsGuarded) {
    auto v = neg_cosine(vec({0, 0, 0}), vec({1, 2, 3}));
    EXPECT_TRUE(std::isfinite(scalar(v)));
}

TEST(NegCosine, StopGradientOnZ) {
    auto p = torch::randn({3, 5}, torch::requires_grad());
    auto z = torch::randn({3, 5}, torch::requires_grad());
    neg_cosine(p, z).backward();
    EXPECT_TRUE(p.grad().defined());
    EXPECT_FALSE(z.grad().defined() && z.grad().abs().sum().item<double>() != 0.0);
}

TEST(StageLoss, Examples) {
    auto a = vec({1, 2}), b = vec({-3, 1});
    EXPECT_NEAR(scalar(stage_loss(a, a, b, b)), -1.0, 1e-12);
    EXPECT_NEAR(scalar(stage_loss(vec({1, 0}), vec({0, 1}), vec({0, 2}), vec({3, 0}))), 0.0, 1e-12);
}

TEST(StageLoss, MatchesBruteForceAndIsSymmetric) {
    torch::manual_seed(7);
    for (int trial = 0; trial < 50; ++trial) {
        auto p1 = torch::randn({8}, torch::kDouble), z2 = torch::randn({8}, torch::kDouble);
        auto p2 = torch::randn({8}, torch::kDouble), z1 = torch::randn({8}, torch::kDouble);
        const double brute =
            0.5 * brute_neg_cosine(to_vec(p1), to_vec(z2)) + 0.5 * brute_neg_cosine(to_vec(p2), to_vec(z1));
        const double got = scalar(stage_loss(p1, z2, p2, z1));
        EXPECT_NEAR(got, brute, 1e-7);
        EXPECT_GE(got, -1.0 - 1e-12);
        EXPECT_LE(got, 1.0 + 1e-12);
        EXPECT_NEAR(got, scalar(stage_loss(p2, z1, p1, z2)), 1e-12);
    }
}

TEST(BranchLoss, Examples) {
    StageWeights w;
    std::vector<double> ones{-1, -1, -1, -1};
    EXPECT_NEAR(dsl_branch_loss(ones, w), -2.2, 1e-12);
    StageWeights zero{{0, 0, 0, 0}};
    std::vector<double> any{0.3, -0.2, 0.9, -0.5};
    EXPECT_EQ(dsl_branch_loss(any, zero), 0.0);
    StageWeights onehot{{0, 0, 1, 0}};
    EXPECT_DOUBLE_EQ(dsl_branch_loss(any, onehot), 0.9);
}

TEST(BranchLoss, LengthMismatch) {
    std::vector<double> three{1, 2, 3};
    EXPECT_THROW(dsl_branch_loss(three, StageWeights{}), ArgumentError);
    StageWeights bad{{1, 2, 3}};
    std::vector<double> four{1, 2, 3, 4};
    EXPECT_THROW(dsl_branch_loss(four, bad), ArgumentError);
}

TEST(TotalLoss, Examples) {
    EXPECT_NEAR(total_loss(-2.2, -2.2, -2.2), -6.6, 1e-12);
    EXPECT_EQ(total_loss(0, 0, 0), 0.0);
}

TEST(HeadBank, TwelveAndTwelveWithExpectedDims) {
    HeadBankOptions o;
    o.stage_widths = {8, 16, 32, 64};
    o.m = 16;
    DSLHeadBank bank(o);
    EXPECT_EQ(bank->projector_count(), 12);
    EXPECT_EQ(bank->predictor_count(), 12);
    for (int s = 0; s < 4; ++s) {
        const int c = o.stage_widths[static_cast<std::size_t>(s)];
        EXPECT_EQ(bank->input_dim(s, Stream::Context), c);
        EXPECT_EQ(bank->input_dim(s, Stream::Target), c);
        EXPECT_EQ(bank->input_dim(s, Stream::Fusion), 17 * c);
        for (Stream st : kStreams) {
            EXPECT_EQ(bank->projector(s, st)->dim(), bank->input_dim(s, st));
            EXPECT_EQ(bank->predictor(s, st)->hidden(), bank->input_dim(s, st) / 4);
            auto x = torch::randn({3, bank->input_dim(s, st)});
            bank->train();
            EXPECT_EQ(bank->predict(bank->project(x, s, st), s, st).sizes(), x.sizes());
        }
    }
}

TEST(HeadBank, FullWidthPredictorHidden) {
    Predictor h(512);
    EXPECT_EQ(h->hidden(), 128);
}

TEST(HeadBank, DimensionMismatchIsPrecondition) {
    HeadBankOptions o;
    o.stage_widths = {8, 16, 32, 64};
    o.m = 4;
    DSLHeadBank bank(o);
    EXPECT_THROW(bank->project(torch::randn({2, 9}), 0, Stream::Context), PreconditionError);
    EXPECT_THROW(bank->project(torch::randn({2, 8}), 0, Stream::Fusion), PreconditionError);
}

TEST(HeadBank, ZeroWeightsGiveZeroPreNormalization) {
    Projector g(6);
    torch::NoGradGuard ng;
    for (auto& p : g->parameters()) p.zero_();
    auto fc1 = g->named_children()["fc1"]->as<torch::nn::LinearImpl>();
    ASSERT_NE(fc1, nullptr);
    EXPECT_TRUE(torch::equal(fc1->forward(torch::randn({2, 6})), torch::zeros({2, 6})));
}

TEST(HeadBank, LastStageOnlyAblation) {
    HeadBankOptions o;
    o.stage_widths = {8, 16, 32, 64};
    o.dense = false;
    DSLHeadBank bank(o);
    EXPECT_EQ(bank->projector_count(), 3);
    EXPECT_EQ(bank->predictor_count(), 3);
    EXPECT_TRUE(bank->has(3, Stream::Fusion));
    EXPECT_FALSE(bank->has(0, Stream::Context));
}

TEST(Objective, IdentityHeadsOnEqualViewsGiveMinusOne) {
    HeadBankOptions o;
    o.stage_widths = {4, 8, 16, 32};
    o.m = 2;
    o.identity = true;
    DSLHeadBank bank(o);
    std::map<Stream, StreamViews> streams;
    torch::manual_seed(3);
    for (int s = 0; s < 4; ++s) {
        for (Stream st : kStreams) {
            auto x = torch::randn({3, bank->input_dim(s, st)});
            streams[st].view1[static_cast<std::size_t>(s)] = x;
            streams[st].view2[static_cast<std::size_t>(s)] = x.clone();
        }
    }
    auto obj = dsl_objective(bank, streams, StageWeights{});
    for (Stream st : kStreams)
        for (int s = 0; s < 4; ++s) EXPECT_NEAR(*obj.report.at(st, s), -1.0, 1e-6);
    EXPECT_NEAR(obj.report.total, -6.6, 1e-5);
    EXPECT_NEAR(*obj.report.l_context + *obj.report.l_target + *obj.report.l_fusion, obj.report.total, 1e-9);
}

TEST(Objective, NonFiniteNamesStreamAndStage) {
    HeadBankOptions o;
    o.stage_widths = {4, 8, 16, 32};
    o.m = 2;
    DSLHeadBank bank(o);
    std::map<Stream, StreamViews> streams;
    for (int s = 0; s < 4; ++s)
        for (Stream st : kStreams) {
            streams[st].view1[static_cast<std::size_t>(s)] = torch::randn({3, bank->input_dim(s, st)});
            streams[st].view2[static_cast<std::size_t>(s)] = torch::randn({3, bank->input_dim(s, st)});
        }
    streams[Stream::Target].view1[1][0][0] = std::nan("");
    try {
        dsl_objective(bank, streams, StageWeights{});
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("target"), std::string::npos) << msg;
        EXPECT_NE(msg.find("stage 2"), std::string::npos) << msg;
    }
}

TEST(StopGradient, FiniteDifferencesOnToyHead) {
    torch::manual_seed(5);
    Projector g(16);
    Predictor h(16);
    g->to(torch::kDouble);
    h->to(torch::kDouble);
    g->train();
    h->train();
    auto x1 = torch::randn({8, 16}, torch::kDouble), x2 = torch::randn({8, 16}, torch::kDouble);
    auto loss_fn = [&] {
        auto z1 = g->forward(x1), z2 = g->forward(x2);
        return stage_loss(h->forward(z1), z2, h->forward(z2), z1);
    };
    for (auto& p : h->parameters()) p.mutable_grad() = torch::Tensor();
    loss_fn().backward();
    const double eps = 1e-6;
    int checked = 0;
    for (auto& p : h->parameters()) {
        auto flat = p.view({-1});
        auto grad = p.grad().view({-1});
        for (std::int64_t i = 0; i < std::min<std::int64_t>(flat.numel(), 6); ++i) {
            const double orig = flat[i].item<double>();
            double plus, minus;
            {
                torch::NoGradGuard ng;
                flat[i] = orig + eps;
                plus = loss_fn().item<double>();
                flat[i] = orig - eps;
                minus = loss_fn().item<double>();
                flat[i] = orig;
            }
            const double fd = (plus - minus) / (2 * eps);
            const double an = grad[i].item<double>();
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            EXPECT_LT(std::abs(fd - an) / denom, 1e-4) << "fd " << fd << " analytic " << an;
            ++checked;
        }
    }
    EXPECT_GT(checked, 10);

    // Gradient into the stopped branch is exactly zero although the loss depends on it.
    auto z = g->forward(x2).detach().requires_grad_(true);
    auto p = h->forward(g->forward(x1));
    auto l = neg_cosine(p, z);
    l.backward();
    EXPECT_FALSE(z.grad().defined() && z.grad().abs().sum().item<double>() != 0.0);
    torch::NoGradGuard ng;
    EXPECT_NE(neg_cosine(p, z + 0.1).item<double>(), l.item<double>());
}
