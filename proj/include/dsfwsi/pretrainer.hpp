#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "dsfwsi/augmentation.hpp"
#include "dsfwsi/ctfm.hpp"
#include "dsfwsi/data_pipeline.hpp"
#include "dsfwsi/dsl_heads.hpp"
#include "dsfwsi/encoder.hpp"

namespace dsfwsi {

struct PretrainConfig {
    int epochs = 500;
    double learning_rate = 1e-3;
    int batch_size = 32;  // groups per batch
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    int targets_per_group = 0;  // 0 = all m targets
    int checkpoint_every = 1;   // epochs between periodic checkpoints, 0 = final only

    EncoderConfig encoder;
    AugmentationConfig augmentation;
    CtfmOptions ctfm;
    StageWeights weights;
    bool dsl_enabled = true;
    bool ctfm_enabled = true;
    bool identity_heads = false;

    void validate() const;
    nlohmann::json to_json() const;
    static PretrainConfig from_json(const nlohmann::json& j);
    /// Digest of every field that affects the optimization trajectory
    /// (excludes epochs and checkpoint cadence).
    std::string hash() const;
};

/// Decoded pixels of one group, ready for view synthesis.
struct GroupImages {
    std::string group_id;
    cv::Mat context;
    std::vector<cv::Mat> targets;
    std::vector<std::string> target_ids;
};

/// Reads every group's patch PNGs. `workers` > 0 decodes concurrently; the
/// result order always follows `groups`.
std::vector<GroupImages> load_group_images(std::span<const ContextGroup> groups, const fs::path& manifest_dir,
                                           int workers = 0);

/// View tensors and fusion plans for one optimizer step.
struct PreparedBatch {
    torch::Tensor context_v1, context_v2;  // B x 3 x S x S
    torch::Tensor target_v1, target_v2;    // (B * m) x 3 x S x S, group-major
    std::vector<FusionPlan> plans_v1, plans_v2;
    int groups = 0;
    int m = 0;
};

/// Two views of each context patch, two views of each of its (sub-sampled)
/// targets, and one fusion plan per group and view. All randomness derives
/// from (seed, epoch, step, group position).
PreparedBatch prepare_batch(std::span<const GroupImages* const> groups, const PretrainConfig& cfg,
                            std::uint64_t epoch, std::uint64_t step, int workers = 0);

struct PretrainState {
    PretrainConfig cfg;
    int m = 0;  // fused target slots (after targets_per_group)
    DualBranchEncoder encoder{nullptr};
    DSLHeadBank heads{nullptr};
    std::unique_ptr<torch::optim::Adam> optimizer;
    int epoch = 0;
    std::int64_t step = 0;

    std::vector<torch::Tensor> parameters() const;
};

PretrainState make_pretrain_state(const PretrainConfig& cfg, int m);

struct StepOptions {
    bool update = true;
    /// Filled with the L2 norm of each parameter's gradient (by qualified
    /// name, prefixed "encoder." or "heads.") when non-null.
    std::map<std::string, double>* grad_norms = nullptr;
};

/// Forward both branches, CTFM and the DSL objective, then one Adam update
/// over encoders and heads.
LossReport pretrain_step(PretrainState& state, const PreparedBatch& batch, const StepOptions& opts = {});

struct PretrainLogRow {
    int epoch = 0;
    double l_context = 0.0, l_target = 0.0, l_fusion = 0.0, total = 0.0;
};

struct PretrainRunOptions {
    fs::path out_dir;
    std::optional<fs::path> resume_from;
    int workers = 0;
    /// Called after each optimizer step with (epoch, step, report).
    std::function<void(int, std::int64_t, const LossReport&)> on_step;
};

/// Full self-supervised run. Writes `loss_log.csv` (epoch,L_c,L_t,L_fu,L;
/// epoch means), `loss_steps.csv` (per step), periodic checkpoints under
/// `checkpoints/epoch_NNNN` and the final state under `checkpoint/`.
PretrainState run_pretraining(std::span<const ContextGroup> groups, const fs::path& manifest_dir,
                              const PretrainConfig& cfg, const PretrainRunOptions& opts);

std::vector<PretrainLogRow> read_loss_log(const fs::path& path);

inline constexpr int kCheckpointFormatVersion = 1;

/// Checkpoint directory: meta.json, encoder_context/, encoder_target/,
/// heads/, optimizer.pt. Written atomically (temporary dir + rename).
void save_checkpoint(PretrainState& state, const fs::path& dir);

/// Rebuilds a state from a checkpoint's own config.
PretrainState load_checkpoint(const fs::path& dir);

/// Loads arrays into an already constructed state (topology must match).
void load_checkpoint_into(PretrainState& state, const fs::path& dir);

/// Human-readable key-level differences between two config JSON objects.
std::vector<std::string> config_diff(const nlohmann::json& a, const nlohmann::json& b, const std::string& prefix = "");

}  // namespace dsfwsi
