#include <gtest/gtest.h>

#include "dsfwsi/config.hpp"

using namespace dsfwsi;

TEST(ExperimentConfigTest, DefaultsRoundTrip) {
    ExperimentConfig c;
    auto back = ExperimentConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(back.pretrain.learning_rate, 1e-3);
    EXPECT_EQ(back.pretrain.batch_size, 32);
    EXPECT_EQ(back.finetune.batch_size, 64);
    EXPECT_EQ(back.tiling.context_window, 1024);
    EXPECT_EQ(back.pretrain.weights.w, (std::vector<double>{0.1, 0.4, 0.7, 1.0}));
}

TEST(ExperimentConfigTest, PartialFileOverridesAndSeedPropagates) {
    auto c = ExperimentConfig::from_json(json::parse(R"({"seed": 9, "encoder": {"base_width": 16},
        "ctfm": {"mask_ratio": 0.25}, "pretrain": {"epochs": 3}})"));
    EXPECT_EQ(c.pretrain.seed, 9u);
    EXPECT_EQ(c.finetune.seed, 9u);
    EXPECT_EQ(c.pretrain.encoder.base_width, 16);
    EXPECT_EQ(c.finetune.encoder.base_width, 16);
    EXPECT_EQ(c.pretrain.ctfm.mask_ratio, 0.25);
    EXPECT_EQ(c.pretrain.epochs, 3);
    c.set_seed(4);
    EXPECT_EQ(c.pretrain.seed, 4u);
    EXPECT_EQ(c.finetune.seed, 4u);
}

TEST(ExperimentConfigTest, UnknownAndMistypedKeysAllReported) {
    try {
        ExperimentConfig::from_json(json::parse(R"({"tiling": {"windw": 3}, "pretrain": {"epochs": "many"}, "extra": 1})"));
        FAIL();
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("tiling.windw"), std::string::npos) << msg;
        EXPECT_NE(msg.find("pretrain.epochs"), std::string::npos) << msg;
        EXPECT_NE(msg.find("extra"), std::string::npos) << msg;
    }
}

TEST(ExperimentConfigTest, ConflictingAblationsRejected) {
    EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"({"dsl": {"jigsaw_only": true, "mask_only": true}})")),
                 ConfigError);
    auto j = ExperimentConfig::from_json(json::parse(R"({"dsl": {"jigsaw_only": true}})"));
    EXPECT_TRUE(j.pretrain.ctfm.shuffle);
    EXPECT_FALSE(j.pretrain.ctfm.mask);
    auto m = ExperimentConfig::from_json(json::parse(R"({"dsl": {"mask_only": true}})"));
    EXPECT_FALSE(m.pretrain.ctfm.shuffle);
    EXPECT_TRUE(m.pretrain.ctfm.mask);
}

TEST(ExperimentConfigTest, InvalidValuesAreConfigErrors) {
    EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"({"finetune": {"fraction": 0}})")), ConfigError);
    EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"({"tiling": {"target_window": 300}})")), ConfigError);
    EXPECT_THROW(ExperimentConfig::from_json(json::parse(R"({"dsl": {"stage_weights": [1, 2]}})")), ConfigError);
}

TEST(SynthFileTest, FlatKeysAndTiling) {
    auto f = parse_synth_config(json::parse(R"({"slides": 3, "low_size": 256, "classes": 2, "ratio": 2,
        "class_fractions": [0.7, 0.3], "seed": 5, "tiling": {"context_window": 256, "target_window": 128,
        "target_step": 128}})"));
    EXPECT_EQ(f.synthetic.slides, 3);
    EXPECT_EQ(f.synthetic.class_fractions, (std::vector<double>{0.7, 0.3}));
    EXPECT_EQ(f.tiling.target_window, 128);
    EXPECT_THROW(parse_synth_config(json::parse(R"({"slidez": 3})")), ConfigError);
}
