#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dsfwsi/errors.hpp"

namespace dsfwsi {

enum class Stream { Context, Target, Fusion };
inline constexpr std::array<Stream, 3> kStreams = {Stream::Context, Stream::Target, Stream::Fusion};
inline constexpr int kStages = 4;

std::string to_string(Stream s);

/// Projector g: three linear layers of width d with batch-norm after each,
/// ReLU after the first two only.
class ProjectorImpl : public torch::nn::Module {
public:
    explicit ProjectorImpl(int dim);
    torch::Tensor forward(const torch::Tensor& x);
    int dim() const { return dim_; }

private:
    int dim_;
    torch::nn::Linear fc1{nullptr}, fc2{nullptr}, fc3{nullptr};
    torch::nn::BatchNorm1d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
};
TORCH_MODULE(Projector);

/// Predictor h: d -> d/4 (batch-norm, ReLU) -> d.
class PredictorImpl : public torch::nn::Module {
public:
    explicit PredictorImpl(int dim);
    torch::Tensor forward(const torch::Tensor& x);
    int dim() const { return dim_; }
    int hidden() const { return hidden_; }

private:
    int dim_, hidden_;
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
    torch::nn::BatchNorm1d bn1{nullptr};
};
TORCH_MODULE(Predictor);

struct HeadBankOptions {
    std::array<int, 4> stage_widths{64, 128, 256, 512};
    int m = 16;                 // target slots fused per group
    bool dense = true;          // false: last stage only
    bool fusion = true;         // build the cross-branch heads
    bool identity = false;      // debug: heads pass inputs through unchanged
};

/// One projector and one predictor per (stage, stream): 12 + 12 with dense
/// supervision and fusion enabled.
class DSLHeadBankImpl : public torch::nn::Module {
public:
    explicit DSLHeadBankImpl(HeadBankOptions opts);

    bool has(int stage, Stream stream) const;
    int input_dim(int stage, Stream stream) const;
    std::vector<int> active_stages() const;
    std::vector<Stream> active_streams() const;
    int projector_count() const { return static_cast<int>(projectors_.size()); }
    int predictor_count() const { return static_cast<int>(predictors_.size()); }

    torch::Tensor project(const torch::Tensor& x, int stage, Stream stream);
    torch::Tensor predict(const torch::Tensor& z, int stage, Stream stream);

    Projector& projector(int stage, Stream stream);
    Predictor& predictor(int stage, Stream stream);
    const HeadBankOptions& options() const { return opts_; }

    /// "s<stage+1>_<stream>", the registered submodule suffix.
    static std::string key(int stage, Stream stream);

private:
    void check(const torch::Tensor& x, int stage, Stream stream) const;
    HeadBankOptions opts_;
    std::map<std::string, Projector> projectors_;
    std::map<std::string, Predictor> predictors_;
};
TORCH_MODULE(DSLHeadBank);

struct StageWeights {
    std::vector<double> w{0.1, 0.4, 0.7, 1.0};
    void validate() const;
};

/// Row-wise negative cosine similarity averaged over the batch:
/// mean_r -(p_r / |p_r|) . (z_r / |z_r|), with z detached and norms computed
/// as sqrt(|x|^2 + 1e-12). Accepts vectors (1-D) or batches (2-D).
torch::Tensor neg_cosine(const torch::Tensor& p, const torch::Tensor& z);

/// 1/2 D(p1, sg(z2)) + 1/2 D(p2, sg(z1)).
torch::Tensor stage_loss(const torch::Tensor& p1, const torch::Tensor& z2, const torch::Tensor& p2,
                         const torch::Tensor& z1);

/// sum_i w_i * L_i over the four stages.
double dsl_branch_loss(std::span<const double> stage_losses, const StageWeights& weights);
torch::Tensor dsl_branch_loss(const std::vector<torch::Tensor>& stage_losses, const StageWeights& weights);

double total_loss(double l_context, double l_target, double l_fusion);

struct LossReport {
    // stage_loss[stream][stage]; std::nullopt where the head is inactive.
    std::array<std::array<std::optional<double>, 4>, 3> stage_loss{};
    std::optional<double> l_context, l_target, l_fusion;
    double total = 0.0;

    std::optional<double> at(Stream s, int stage) const {
        return stage_loss[static_cast<std::size_t>(s)][static_cast<std::size_t>(stage)];
    }
};

/// Pooled features of one stream: per stage, view-1 and view-2 batches of
/// row vectors (rows line up across the two views).
struct StreamViews {
    std::array<torch::Tensor, 4> view1;
    std::array<torch::Tensor, 4> view2;
};

struct DSLObjective {
    torch::Tensor total;
    LossReport report;
};

/// Applies the head bank to every active (stage, stream) and returns the
/// weighted objective. When dense supervision is off the last stage enters
/// with weight 1. Throws NumericalError naming the first non-finite stream
/// and stage.
DSLObjective dsl_objective(DSLHeadBank& heads, const std::map<Stream, StreamViews>& streams,
                           const StageWeights& weights);

}  // namespace dsfwsi
