#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dsfwsi/errors.hpp"

namespace dsfwsi {

enum class Branch { Context, Target };

std::string to_string(Branch b);

struct EncoderConfig {
    int base_width = 64;        // stage widths are base * {1, 2, 4, 8}
    double bn_momentum = 0.1;   // running-statistics momentum

    std::array<int, 4> stage_widths() const {
        return {base_width, 2 * base_width, 4 * base_width, 8 * base_width};
    }
};

/// The four residual-stage outputs of one branch for one batch of views.
/// `stem` is the stride-2 stem activation (before max-pooling), kept for the
/// segmentation decoder's highest-resolution skip connection.
struct StageFeatureSet {
    std::array<torch::Tensor, 4> features;
    torch::Tensor stem;
};

class BasicBlockImpl : public torch::nn::Module {
public:
    BasicBlockImpl(int in_channels, int out_channels, int stride, double bn_momentum);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
    torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(BasicBlock);

/// ResNet-18 body without the classifier.
class ResNet18EncoderImpl : public torch::nn::Module {
public:
    explicit ResNet18EncoderImpl(EncoderConfig cfg = {});

    /// Runs the stem and all four stages in one pass. Input must be
    /// B x 3 x H x W with H, W divisible by 32.
    StageFeatureSet forward_stages(const torch::Tensor& x);
    torch::Tensor forward(const torch::Tensor& x) { return forward_stages(x).features[3]; }

    const EncoderConfig& config() const { return cfg_; }
    torch::nn::Conv2d& stem_conv() { return conv1; }

private:
    EncoderConfig cfg_;
    torch::nn::Conv2d conv1{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr};
    torch::nn::Sequential layer1{nullptr}, layer2{nullptr}, layer3{nullptr}, layer4{nullptr};
};
TORCH_MODULE(ResNet18Encoder);

/// Context and target backbones with identical topology and unshared weights.
class DualBranchEncoderImpl : public torch::nn::Module {
public:
    DualBranchEncoderImpl(EncoderConfig cfg, std::uint64_t seed);

    ResNet18Encoder& branch(Branch b) { return b == Branch::Context ? context : target; }
    StageFeatureSet forward_stages(Branch b, const torch::Tensor& x) { return branch(b)->forward_stages(x); }
    std::uint64_t seed() const { return seed_; }
    const EncoderConfig& config() const { return cfg_; }

    ResNet18Encoder context{nullptr};
    ResNet18Encoder target{nullptr};

private:
    EncoderConfig cfg_;
    std::uint64_t seed_;
};
TORCH_MODULE(DualBranchEncoder);

/// Builds one branch deterministically from `seed` (He-normal convolutions,
/// unit/zero batch-norm affine).
ResNet18Encoder make_encoder(const EncoderConfig& cfg, std::uint64_t seed);

/// Both branches, initialized from independent sub-seeds of `seed`.
DualBranchEncoder init_params(std::uint64_t seed, const EncoderConfig& cfg = {});

/// Spatial mean: B x C x H x W -> B x C.
torch::Tensor global_pool(const torch::Tensor& map);

/// Per-branch checkpoint directory: one .npy per parameter/buffer plus
/// meta.json {format_version, branch, stage_widths, seed}.
void save_encoder(ResNet18Encoder& enc, Branch branch, std::uint64_t seed, const std::filesystem::path& dir);
/// Loads into an existing encoder; stage widths in meta.json must match.
void load_encoder(ResNet18Encoder& enc, const std::filesystem::path& dir);

inline constexpr int kEncoderFormatVersion = 1;

}  // namespace dsfwsi
