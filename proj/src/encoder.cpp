#include "dsfwsi/encoder.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "dsfwsi/rng.hpp"
#include "dsfwsi/tensor_io.hpp"

namespace dsfwsi {

namespace nn = torch::nn;

std::string to_string(Branch b) { return b == Branch::Context ? "context" : "target"; }

namespace {

nn::Conv2d conv3x3(int in, int out, int stride) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false));
}

nn::BatchNorm2d batch_norm(int channels, double momentum) {
    return nn::BatchNorm2d(nn::BatchNorm2dOptions(channels).momentum(momentum));
}

}  // namespace

BasicBlockImpl::BasicBlockImpl(int in_channels, int out_channels, int stride, double bn_momentum) {
    conv1 = register_module("conv1", conv3x3(in_channels, out_channels, stride));
    bn1 = register_module("bn1", batch_norm(out_channels, bn_momentum));
    conv2 = register_module("conv2", conv3x3(out_channels, out_channels, 1));
    bn2 = register_module("bn2", batch_norm(out_channels, bn_momentum));
    if (stride != 1 || in_channels != out_channels) {
        downsample = register_module(
            "downsample",
            nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1).stride(stride).bias(false)),
                           batch_norm(out_channels, bn_momentum)));
    }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
    auto out = torch::relu(bn1(conv1(x)));
    out = bn2(conv2(out));
    auto identity = downsample ? downsample->forward(x) : x;
    return torch::relu(out + identity);
}

ResNet18EncoderImpl::ResNet18EncoderImpl(EncoderConfig cfg) : cfg_(cfg) {
    if (cfg.base_width < 1) throw ConfigError("encoder: base_width must be >= 1");
    const auto w = cfg.stage_widths();
    conv1 = register_module(
        "conv1", nn::Conv2d(nn::Conv2dOptions(3, w[0], 7).stride(2).padding(3).bias(false)));
    bn1 = register_module("bn1", batch_norm(w[0], cfg.bn_momentum));
    auto make_layer = [&](int in, int out, int stride) {
        return nn::Sequential(BasicBlock(in, out, stride, cfg.bn_momentum),
                              BasicBlock(out, out, 1, cfg.bn_momentum));
    };
    layer1 = register_module("layer1", make_layer(w[0], w[0], 1));
    layer2 = register_module("layer2", make_layer(w[0], w[1], 2));
    layer3 = register_module("layer3", make_layer(w[1], w[2], 2));
    layer4 = register_module("layer4", make_layer(w[2], w[3], 2));
}

StageFeatureSet ResNet18EncoderImpl::forward_stages(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != 3)
        throw PreconditionError("encoder expects B x 3 x H x W input, got " + c10::str(x.sizes()));
    if (x.size(2) % 32 != 0 || x.size(3) % 32 != 0)
        throw PreconditionError("encoder input spatial size must be divisible by 32, got " + c10::str(x.sizes()));
    StageFeatureSet out;
    out.stem = torch::relu(bn1(conv1(x)));
    auto h = torch::max_pool2d(out.stem, 3, 2, 1);
    out.features[0] = layer1->forward(h);
    out.features[1] = layer2->forward(out.features[0]);
    out.features[2] = layer3->forward(out.features[1]);
    out.features[3] = layer4->forward(out.features[2]);
    return out;
}

ResNet18Encoder make_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
    torch::manual_seed(seed);
    ResNet18Encoder enc(cfg);
    torch::NoGradGuard no_grad;
    for (auto& m : enc->modules(false)) {
        if (auto* conv = m->as<nn::Conv2d>()) {
            nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
        } else if (auto* bn = m->as<nn::BatchNorm2d>()) {
            nn::init::ones_(bn->weight);
            nn::init::zeros_(bn->bias);
        }
    }
    return enc;
}

DualBranchEncoderImpl::DualBranchEncoderImpl(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    context = register_module("context", make_encoder(cfg, derive_seed(seed, {1})));
    target = register_module("target", make_encoder(cfg, derive_seed(seed, {2})));
}

DualBranchEncoder init_params(std::uint64_t seed, const EncoderConfig& cfg) { return DualBranchEncoder(cfg, seed); }

torch::Tensor global_pool(const torch::Tensor& map) {
    if (map.dim() != 4) throw PreconditionError("global_pool expects B x C x H x W");
    return map.mean({2, 3});
}

void save_encoder(ResNet18Encoder& enc, Branch branch, std::uint64_t seed, const std::filesystem::path& dir) {
    save_module_arrays(*enc, dir);
    const auto w = enc->config().stage_widths();
    nlohmann::json meta = {{"format_version", kEncoderFormatVersion},
                           {"branch", to_string(branch)},
                           {"stage_widths", w},
                           {"seed", seed}};
    std::ofstream out(dir / "meta.json");
    out << meta.dump(2) << "\n";
    if (!out) throw IoError("cannot write '" + (dir / "meta.json").string() + "'");
}

void load_encoder(ResNet18Encoder& enc, const std::filesystem::path& dir) {
    std::ifstream in(dir / "meta.json");
    if (!in) throw IntegrityError("encoder checkpoint '" + dir.string() + "' has no meta.json");
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw VersionError("encoder checkpoint '" + dir.string() + "': unreadable metadata (" + e.what() + ")");
    }
    if (!meta.contains("format_version") || meta["format_version"] != kEncoderFormatVersion)
        throw VersionError("encoder checkpoint '" + dir.string() + "': unsupported format_version");
    const auto widths = meta.value("stage_widths", std::vector<int>{});
    const auto expected = enc->config().stage_widths();
    if (widths != std::vector<int>(expected.begin(), expected.end()))
        throw ShapeMismatchError("encoder checkpoint '" + dir.string() + "': stage_widths " +
                                 nlohmann::json(widths).dump() + " differ from model " +
                                 nlohmann::json(expected).dump());
    load_module_arrays(*enc, dir);
}

}  // namespace dsfwsi
