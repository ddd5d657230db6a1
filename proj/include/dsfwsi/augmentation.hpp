#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "dsfwsi/errors.hpp"
#include "dsfwsi/rng.hpp"

namespace dsfwsi {

/// The SimSiam view family. All constants live here so they are serialized
/// with the experiment config.
struct AugmentationConfig {
    bool enabled = true;

    double crop_scale_min = 0.2;
    double crop_scale_max = 1.0;
    double crop_ratio_min = 3.0 / 4.0;
    double crop_ratio_max = 4.0 / 3.0;

    double flip_p = 0.5;

    double jitter_p = 0.8;
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.4;
    double hue = 0.1;

    double grayscale_p = 0.2;

    double blur_p = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 2.0;

    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> std{0.229, 0.224, 0.225};

    /// Every stochastic op off and the crop pinned to the full frame.
    static AugmentationConfig identity();
    void validate() const;
};

/// What make_view actually did, for inspection and tests.
struct ViewTrace {
    cv::Rect crop;
    bool flipped = false;
    bool jittered = false;
    bool grayscale = false;
    bool blurred = false;
    double blur_sigma = 0.0;
};

struct View {
    torch::Tensor image;  // 3 x S x S float32, normalized
    ViewTrace trace;
};

/// Random resized crop -> horizontal flip -> colour jitter -> grayscale ->
/// Gaussian blur -> per-channel normalization. `image` must be a square
/// CV_8UC3 RGB raster; when `expected_size` > 0 its side must match.
View make_view(const cv::Mat& image, Rng& rng, const AugmentationConfig& cfg, int expected_size = 0);

/// Normalization only: uint8 RGB -> 3 x H x W float.
torch::Tensor to_normalized_tensor(const cv::Mat& image, const AugmentationConfig& cfg);

struct ViewPair {
    torch::Tensor view1;
    torch::Tensor view2;
    std::string patch_id;
    std::uint64_t seed1 = 0;
    std::uint64_t seed2 = 0;
    ViewTrace trace1;
    ViewTrace trace2;
};

/// Two views from independent generators derived from `seed`.
ViewPair make_view_pair(const cv::Mat& image, std::uint64_t seed, const AugmentationConfig& cfg,
                        std::string patch_id = {}, int expected_size = 0);

}  // namespace dsfwsi
