#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "dsfwsi/augmentation.hpp"
#include "dsfwsi/data_pipeline.hpp"
#include "dsfwsi/encoder.hpp"
#include "dsfwsi/evaluator.hpp"

namespace dsfwsi {

// ---------------------------------------------------------------------------
// Hooking

/// (row, col) offset of a centred crop of size (bh, bw) inside (ch, cw).
std::pair<int, int> center_crop_offset(int ch, int cw, int bh, int bw);

/// Offset of the (bh, bw) crop covering target slot `slot` of a `grid` x
/// `grid` layout inside a (ch, cw) context map. Centred inside the slot cell
/// and clamped to the map.
std::pair<int, int> slot_crop_offset(int slot, int grid, int ch, int cw, int bh, int bw);

struct HookResult {
    torch::Tensor features;  // B x (Cb + Cc) x bh x bw
    std::pair<int, int> offset{0, 0};
};

/// Centre-crops `context_map` to the bottleneck's spatial size and
/// concatenates [bottleneck, crop] along channels.
HookResult hook_features(const torch::Tensor& context_map, const torch::Tensor& bottleneck);

/// Same with one crop offset per batch item.
torch::Tensor hook_features(const torch::Tensor& context_map, const torch::Tensor& bottleneck,
                            std::span<const std::pair<int, int>> offsets);

// ---------------------------------------------------------------------------
// Model

/// Upsample x2, concatenate the skip map, two conv-BN-ReLU layers.
class UpBlockImpl : public torch::nn::Module {
public:
    UpBlockImpl(int in_channels, int skip_channels, int out_channels);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);

private:
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
};
TORCH_MODULE(UpBlock);

/// Mirrors the encoder: four up-blocks (stage 3, 2, 1 and stem skips) and a
/// final x2 upsample back to input resolution.
class DecoderImpl : public torch::nn::Module {
public:
    DecoderImpl(int in_channels, EncoderConfig enc);

    /// Returns the full-resolution map. When `capture_depth` >= 0 the map
    /// after that many up-blocks (0 = the input) is stored in `*captured`.
    torch::Tensor forward(const torch::Tensor& bottleneck, const StageFeatureSet& skips, int capture_depth = -1,
                          torch::Tensor* captured = nullptr);

    /// Channel width after `depth` up-blocks.
    int width_at(int depth) const;
    int out_channels() const { return widths_[3]; }

private:
    int in_channels_;
    std::array<int, 4> widths_;
    UpBlock up1{nullptr}, up2{nullptr}, up3{nullptr}, up4{nullptr};
};
TORCH_MODULE(Decoder);

enum class HookCrop { Slot, Center };

std::string to_string(HookCrop c);
HookCrop parse_hook_crop(const std::string& s);

struct HookNetOptions {
    EncoderConfig encoder;
    int classes = 3;
    int hook_depth = 2;
    int grid = 4;  // targets per side of a context patch
    HookCrop crop = HookCrop::Slot;
};

struct HookNetOutput {
    torch::Tensor target_logits;   // B x C x H x W
    torch::Tensor context_logits;  // B x C x H x W
};

class HookNetModelImpl : public torch::nn::Module {
public:
    HookNetModelImpl(HookNetOptions opts, std::uint64_t seed);

    /// `context` and `target` are paired B x 3 x H x W batches; `slots` gives
    /// each target's position inside its context patch (-1 = centre).
    HookNetOutput forward(const torch::Tensor& context, const torch::Tensor& target, std::span<const int> slots);

    const HookNetOptions& options() const { return opts_; }
    /// Runtime switch: when off, the hooked slice is zeros (same weights).
    bool hooking = true;

    ResNet18Encoder context_encoder{nullptr}, target_encoder{nullptr};
    Decoder context_decoder{nullptr}, target_decoder{nullptr};
    torch::nn::Conv2d context_head{nullptr}, target_head{nullptr};

private:
    HookNetOptions opts_;
};
TORCH_MODULE(HookNetModel);

/// lambda * CE(target) + (1 - lambda) * CE(context). Pixels labelled
/// `ignore_index` are skipped. With lambda == 1 the context logits are never
/// read. Labels >= classes (other than ignore_index) raise ArgumentError.
torch::Tensor seg_loss(const HookNetOutput& out, const torch::Tensor& target_labels,
                       const torch::Tensor& context_labels, double lambda, int ignore_index = 255);

/// Copies both encoders from a pretraining checkpoint directory.
void init_from_pretrained(HookNetModel& model, const fs::path& checkpoint_dir);

void save_hooknet(HookNetModel& model, const fs::path& dir);
HookNetModel load_hooknet(const fs::path& dir);

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneConfig {
    int epochs = 50;
    double learning_rate = 1e-3;
    int batch_size = 64;  // target patches per batch
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double fraction = 1.0;
    int fold = 0;
    int folds = 5;
    std::uint64_t split_seed = 0;
    std::uint64_t seed = 0;
    double lambda = 1.0;
    int ignore_index = 255;
    int classes = 3;
    int hook_depth = 2;
    HookCrop hook_crop = HookCrop::Slot;
    bool hooking = true;
    EncoderConfig encoder;
    AugmentationConfig augmentation;  // only mean/std are used

    void validate() const;
    nlohmann::json to_json() const;
    static FinetuneConfig from_json(const nlohmann::json& j);
};

/// One labelled target patch with its context patch.
struct SegItem {
    std::string patch_id;
    std::string group_id;
    int slot = -1;
    std::size_t context_index = 0;  // into SegData::contexts
    std::string label_path;
};

struct SegData {
    std::vector<SegItem> items;
    std::vector<torch::Tensor> contexts;        // 3 x S x S, normalized
    std::vector<torch::Tensor> context_labels;  // S x S int64
    std::vector<torch::Tensor> targets;         // 3 x S x S, normalized
    std::vector<torch::Tensor> target_labels;   // S x S int64
};

SegData load_seg_data(std::span<const ContextGroup> groups, const fs::path& manifest_dir, const FinetuneConfig& cfg,
                      int workers = 0);

/// Confusion counts of argmax predictions over `data`; optionally returns
/// the predicted maps (uint8) in item order.
ConfusionCounts evaluate_model(HookNetModel& model, const SegData& data, const FinetuneConfig& cfg,
                               std::vector<cv::Mat>* predictions = nullptr);

struct FinetuneLogRow {
    int epoch = 0;
    double train_loss = 0.0;
    double val_mean_f1 = 0.0;
    double val_micro_f1 = 0.0;
    double val_accuracy = 0.0;
};

struct FinetuneRunOptions {
    std::optional<fs::path> out_dir;          // artifacts are skipped when empty
    std::optional<fs::path> init_checkpoint;  // pretraining checkpoint; random init when empty
    int workers = 0;
    bool dump_predictions = true;
    /// Train on these groups and validate on them too (overfit checks).
    bool train_is_validation = false;
    std::function<void(const FinetuneLogRow&)> on_epoch;
};

struct FinetuneResult {
    HookNetModel model{nullptr};  // best-validation weights
    Metrics best;
    int best_epoch = 0;
    std::vector<FinetuneLogRow> log;
    std::size_t train_groups = 0;
    std::size_t train_groups_available = 0;
    std::size_t val_groups = 0;
    std::size_t train_patches = 0;
};

/// Slide-level fold split, fraction subsample of the training groups, Adam
/// training, validation every epoch, best mean-F1 selection. Writes
/// metrics_log.csv, metrics.json, model/ and predictions/ under out_dir.
FinetuneResult run_finetune(std::span<const ContextGroup> groups, const fs::path& manifest_dir,
                            const FinetuneConfig& cfg, const FinetuneRunOptions& opts);

}  // namespace dsfwsi
