#include <gtest/gtest.h>

#include "dsfwsi/encoder.hpp"
#include "fixtures.hpp"

using namespace dsfwsi;

namespace {

torch::Tensor first_param(ResNet18Encoder& e) { return e->parameters().front(); }

double checksum(torch::nn::Module& m) {
    double s = 0;
    for (auto& p : m.parameters()) s += p.to(torch::kDouble).abs().sum().item<double>() + p.to(torch::kDouble).sum().item<double>();
    return s;
}

}  // namespace

TEST(Encoder, StageShapesAt224) {
    auto enc = make_encoder(EncoderConfig{}, 0);
    enc->eval();
    torch::NoGradGuard ng;
    auto f = enc->forward_stages(torch::randn({2, 3, 224, 224}));
    const std::vector<std::vector<std::int64_t>> want{
        {2, 64, 56, 56}, {2, 128, 28, 28}, {2, 256, 14, 14}, {2, 512, 7, 7}};
    for (int s = 0; s < 4; ++s) {
        EXPECT_EQ(f.features[static_cast<std::size_t>(s)].sizes(), want[static_cast<std::size_t>(s)]);
        EXPECT_TRUE(torch::isfinite(f.features[static_cast<std::size_t>(s)]).all().item<bool>());
    }
    EXPECT_EQ(f.stem.sizes(), (std::vector<std::int64_t>{2, 64, 112, 112}));
}

TEST(Encoder, BatchOfOneInEval) {
    auto enc = make_encoder(EncoderConfig{8}, 1);
    enc->eval();
    torch::NoGradGuard ng;
    auto f = enc->forward_stages(torch::randn({1, 3, 64, 64}));
    EXPECT_EQ(f.features[3].sizes(), (std::vector<std::int64_t>{1, 64, 2, 2}));
}

TEST(Encoder, ZeroInputGivesZeroStemConvolution) {
    auto enc = make_encoder(EncoderConfig{8}, 2);
    torch::NoGradGuard ng;
    auto out = enc->stem_conv()->forward(torch::zeros({1, 3, 32, 32}));
    EXPECT_EQ(out.abs().max().item<float>(), 0.0f);
}

TEST(Encoder, DeterministicInInference) {
    auto a = make_encoder(EncoderConfig{8}, 5), b = make_encoder(EncoderConfig{8}, 5);
    a->eval();
    b->eval();
    torch::NoGradGuard ng;
    auto x = torch::randn({2, 3, 64, 64});
    for (int s = 0; s < 4; ++s)
        EXPECT_TRUE(torch::equal(a->forward_stages(x).features[static_cast<std::size_t>(s)],
                                 b->forward_stages(x).features[static_cast<std::size_t>(s)]));
}

TEST(Encoder, InputNotDivisibleIsPrecondition) {
    auto enc = make_encoder(EncoderConfig{8}, 0);
    EXPECT_THROW(enc->forward_stages(torch::randn({1, 3, 50, 50})), PreconditionError);
    EXPECT_THROW(enc->forward_stages(torch::randn({1, 4, 64, 64})), PreconditionError);
    EXPECT_THROW(enc->forward_stages(torch::randn({3, 64, 64})), PreconditionError);
}

TEST(GlobalPool, Examples) {
    auto c = torch::full({2, 3, 4, 4}, 2.5);
    EXPECT_TRUE(torch::allclose(global_pool(c), torch::full({2, 3}, 2.5)));
    auto m = torch::tensor({1.0f, 3.0f, 5.0f, 7.0f}).reshape({1, 1, 2, 2});
    EXPECT_FLOAT_EQ(global_pool(m).item<float>(), 4.0f);
    auto r = torch::randn({3, 5, 6, 7}, torch::kDouble);
    auto g = global_pool(r);
    for (int b = 0; b < 3; ++b)
        for (int ch = 0; ch < 5; ++ch) {
            double s = 0;
            for (int y = 0; y < 6; ++y)
                for (int x = 0; x < 7; ++x) s += r[b][ch][y][x].item<double>();
            EXPECT_NEAR(g[b][ch].item<double>(), s / 42.0, 1e-6);
        }
}

TEST(InitParams, SeedBehaviour) {
    EncoderConfig cfg{8};
    auto a = init_params(3, cfg), b = init_params(3, cfg), c = init_params(4, cfg);
    EXPECT_TRUE(torch::equal(first_param(a->context), first_param(b->context)));
    EXPECT_TRUE(torch::equal(first_param(a->target), first_param(b->target)));
    EXPECT_FALSE(torch::equal(first_param(a->context), first_param(c->context)));
    EXPECT_FALSE(torch::equal(first_param(a->context), first_param(a->target)));
    auto pa = a->context->named_parameters(), pt = a->target->named_parameters();
    ASSERT_EQ(pa.size(), pt.size());
    for (const auto& kv : pa) EXPECT_EQ(kv.value().sizes(), pt[kv.key()].sizes()) << kv.key();
}

TEST(InitParams, ContextUpdateLeavesTargetUntouched) {
    auto enc = init_params(0, EncoderConfig{8});
    const double before = checksum(*enc->target);
    const double ctx_before = checksum(*enc->context);
    torch::optim::SGD opt(enc->context->parameters(), torch::optim::SGDOptions(0.1));
    auto loss = enc->forward_stages(Branch::Context, torch::randn({2, 3, 64, 64})).features[3].pow(2).mean();
    loss.backward();
    opt.step();
    EXPECT_EQ(checksum(*enc->target), before);
    EXPECT_NE(checksum(*enc->context), ctx_before);
    for (auto& p : enc->target->parameters()) EXPECT_FALSE(p.grad().defined());
}

TEST(EncoderCheckpoint, RoundTripAndShapeMismatch) {
    dsfwsi::testing::TempDir dir("enc");
    auto a = make_encoder(EncoderConfig{8}, 9);
    save_encoder(a, Branch::Target, 9, dir / "t");
    EXPECT_TRUE(fs::exists(dir / "t" / "meta.json"));
    auto b = make_encoder(EncoderConfig{8}, 10);
    load_encoder(b, dir / "t");
    auto pa = a->named_parameters(), pb = b->named_parameters();
    for (const auto& kv : pa) EXPECT_TRUE(torch::equal(kv.value(), pb[kv.key()])) << kv.key();
    for (const auto& kv : a->named_buffers()) EXPECT_TRUE(torch::equal(kv.value(), b->named_buffers()[kv.key()]));
    auto wrong = make_encoder(EncoderConfig{16}, 0);
    EXPECT_THROW(load_encoder(wrong, dir / "t"), ShapeMismatchError);
}
