#include "dsfwsi/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgproc.hpp>

namespace dsfwsi {

AugmentationConfig AugmentationConfig::identity() {
    AugmentationConfig c;
    c.enabled = false;
    c.crop_scale_min = c.crop_scale_max = 1.0;
    c.flip_p = c.jitter_p = c.grayscale_p = c.blur_p = 0.0;
    return c;
}

void AugmentationConfig::validate() const {
    if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0))
        throw ConfigError("augmentation: crop scale must satisfy 0 < min <= max <= 1");
    if (!(crop_ratio_min > 0.0 && crop_ratio_min <= crop_ratio_max))
        throw ConfigError("augmentation: crop ratio must satisfy 0 < min <= max");
    for (double p : {flip_p, jitter_p, grayscale_p, blur_p})
        if (p < 0.0 || p > 1.0) throw ConfigError("augmentation: probabilities must lie in [0, 1]");
    if (brightness < 0 || contrast < 0 || saturation < 0 || hue < 0 || hue > 0.5)
        throw ConfigError("augmentation: jitter strengths must be non-negative (hue <= 0.5)");
    if (!(blur_sigma_min > 0.0 && blur_sigma_min <= blur_sigma_max))
        throw ConfigError("augmentation: blur sigma range invalid");
    for (double s : std)
        if (!(s > 0.0)) throw ConfigError("augmentation: normalization std must be positive");
}

namespace {

cv::Rect sample_crop(int width, int height, Rng& rng, const AugmentationConfig& cfg) {
    const double area = static_cast<double>(width) * height;
    const double log_lo = std::log(cfg.crop_ratio_min);
    const double log_hi = std::log(cfg.crop_ratio_max);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target_area = area * uniform(rng, cfg.crop_scale_min, cfg.crop_scale_max);
        const double aspect = std::exp(uniform(rng, log_lo, log_hi));
        const int w = static_cast<int>(std::lround(std::sqrt(target_area * aspect)));
        const int h = static_cast<int>(std::lround(std::sqrt(target_area / aspect)));
        if (w > 0 && h > 0 && w <= width && h <= height) {
            const int y = std::uniform_int_distribution<int>(0, height - h)(rng);
            const int x = std::uniform_int_distribution<int>(0, width - w)(rng);
            return {x, y, w, h};
        }
    }
    // Fallback: centre crop clamped to the ratio range.
    const double in_ratio = static_cast<double>(width) / height;
    int w = width, h = height;
    if (in_ratio < cfg.crop_ratio_min) {
        h = static_cast<int>(std::lround(w / cfg.crop_ratio_min));
    } else if (in_ratio > cfg.crop_ratio_max) {
        w = static_cast<int>(std::lround(h * cfg.crop_ratio_max));
    }
    return {(width - w) / 2, (height - h) / 2, w, h};
}

// Helpers below operate on CV_32FC3 RGB in [0, 1].

cv::Mat luminance(const cv::Mat& img) {
    cv::Mat gray;
    cv::transform(img, gray, cv::Matx13f(0.299f, 0.587f, 0.114f));
    return gray;
}

void clamp01(cv::Mat& img) {
    cv::min(img, 1.0, img);
    cv::max(img, 0.0, img);
}

void blend_with(cv::Mat& img, const cv::Mat& other, double factor) {
    cv::addWeighted(img, factor, other, 1.0 - factor, 0.0, img);
    clamp01(img);
}

void adjust_hue(cv::Mat& img, double shift) {
    cv::Mat hsv;
    cv::cvtColor(img, hsv, cv::COLOR_RGB2HSV);
    const float delta = static_cast<float>(shift * 360.0);
    for (int y = 0; y < hsv.rows; ++y) {
        auto* px = hsv.ptr<cv::Vec3f>(y);
        for (int x = 0; x < hsv.cols; ++x) {
            float h = std::fmod(px[x][0] + delta, 360.0f);
            if (h < 0) h += 360.0f;
            px[x][0] = h;
        }
    }
    cv::cvtColor(hsv, img, cv::COLOR_HSV2RGB);
    clamp01(img);
}

void colour_jitter(cv::Mat& img, Rng& rng, const AugmentationConfig& cfg) {
    std::array<int, 4> order{0, 1, 2, 3};
    std::shuffle(order.begin(), order.end(), rng);
    auto factor = [&](double strength) { return uniform(rng, std::max(0.0, 1.0 - strength), 1.0 + strength); };
    const double b = factor(cfg.brightness);
    const double c = factor(cfg.contrast);
    const double s = factor(cfg.saturation);
    const double h = uniform(rng, -cfg.hue, cfg.hue);
    for (int op : order) {
        switch (op) {
            case 0:
                img *= b;
                clamp01(img);
                break;
            case 1: {
                const double mean = cv::mean(luminance(img))[0];
                blend_with(img, cv::Mat(img.size(), img.type(), cv::Scalar::all(mean)), c);
                break;
            }
            case 2: {
                cv::Mat gray3;
                cv::cvtColor(luminance(img), gray3, cv::COLOR_GRAY2RGB);
                blend_with(img, gray3, s);
                break;
            }
            case 3:
                if (h != 0.0) adjust_hue(img, h);
                break;
        }
    }
}

torch::Tensor normalize_float(const cv::Mat& img01, const AugmentationConfig& cfg) {
    const int h = img01.rows, w = img01.cols;
    auto out = torch::empty({3, h, w}, torch::kFloat);
    auto acc = out.accessor<float, 3>();
    for (int y = 0; y < h; ++y) {
        const auto* px = img01.ptr<cv::Vec3f>(y);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                acc[c][y][x] = static_cast<float>((px[x][c] - cfg.mean[c]) / cfg.std[c]);
    }
    return out;
}

}  // namespace

torch::Tensor to_normalized_tensor(const cv::Mat& image, const AugmentationConfig& cfg) {
    if (image.empty() || image.type() != CV_8UC3) throw PreconditionError("expected an 8-bit RGB raster");
    cv::Mat f;
    image.convertTo(f, CV_32FC3, 1.0 / 255.0);
    return normalize_float(f, cfg);
}

View make_view(const cv::Mat& image, Rng& rng, const AugmentationConfig& cfg, int expected_size) {
    if (image.empty() || image.type() != CV_8UC3 || image.rows != image.cols)
        throw PreconditionError("make_view expects a square 8-bit RGB raster");
    if (expected_size > 0 && image.rows != expected_size)
        throw PreconditionError("make_view expects " + std::to_string(expected_size) + "x" +
                                std::to_string(expected_size) + " input, got " + std::to_string(image.cols) +
                                "x" + std::to_string(image.rows));
    const int size = image.rows;
    View view;
    cv::Mat img;
    image.convertTo(img, CV_32FC3, 1.0 / 255.0);
    if (!cfg.enabled) {
        view.trace.crop = {0, 0, size, size};
        view.image = normalize_float(img, cfg);
        return view;
    }

    view.trace.crop = sample_crop(size, size, rng, cfg);
    if (view.trace.crop != cv::Rect(0, 0, size, size)) {
        cv::Mat resized;
        cv::resize(img(view.trace.crop), resized, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
        img = resized;
    }
    if (bernoulli(rng, cfg.flip_p)) {
        cv::flip(img, img, 1);
        view.trace.flipped = true;
    }
    if (bernoulli(rng, cfg.jitter_p)) {
        colour_jitter(img, rng, cfg);
        view.trace.jittered = true;
    }
    if (bernoulli(rng, cfg.grayscale_p)) {
        cv::cvtColor(luminance(img), img, cv::COLOR_GRAY2RGB);
        view.trace.grayscale = true;
    }
    if (bernoulli(rng, cfg.blur_p)) {
        view.trace.blur_sigma = uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max);
        cv::GaussianBlur(img, img, cv::Size(0, 0), view.trace.blur_sigma, view.trace.blur_sigma,
                         cv::BORDER_REFLECT_101);
        view.trace.blurred = true;
    }
    view.image = normalize_float(img, cfg);
    return view;
}

ViewPair make_view_pair(const cv::Mat& image, std::uint64_t seed, const AugmentationConfig& cfg,
                        std::string patch_id, int expected_size) {
    ViewPair pair;
    pair.patch_id = std::move(patch_id);
    pair.seed1 = derive_seed(seed, {1});
    pair.seed2 = derive_seed(seed, {2});
    Rng r1(pair.seed1), r2(pair.seed2);
    auto v1 = make_view(image, r1, cfg, expected_size);
    auto v2 = make_view(image, r2, cfg, expected_size);
    pair.view1 = v1.image;
    pair.view2 = v2.image;
    pair.trace1 = v1.trace;
    pair.trace2 = v2.trace;
    return pair;
}

}  // namespace dsfwsi
