#include "dsfwsi/ctfm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dsfwsi {

bool FusionPlan::is_masked(int slot) const {
    return std::binary_search(mask_set.begin(), mask_set.end(), slot);
}

int masked_slot_count(int m, double mask_ratio) {
    // The epsilon keeps ratios like 0.3 * 10 from flooring to 2.
    return static_cast<int>(std::floor(static_cast<double>(m) * mask_ratio + 1e-9));
}

FusionPlan sample_fusion_plan(int m, double mask_ratio, std::uint64_t seed, bool shuffle, bool mask) {
    if (m < 1) throw ArgumentError("fusion plan needs m >= 1");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0))
        throw ArgumentError("mask_ratio must lie in [0, 1]");
    FusionPlan plan;
    plan.m = m;
    plan.mask_ratio = mask_ratio;
    plan.seed = seed;
    plan.permutation.resize(m);
    std::iota(plan.permutation.begin(), plan.permutation.end(), 0);

    Rng rng(seed);
    if (shuffle) std::shuffle(plan.permutation.begin(), plan.permutation.end(), rng);
    if (mask) {
        std::vector<int> slots(m);
        std::iota(slots.begin(), slots.end(), 0);
        std::shuffle(slots.begin(), slots.end(), rng);
        slots.resize(masked_slot_count(m, mask_ratio));
        std::sort(slots.begin(), slots.end());
        plan.mask_set = std::move(slots);
    }
    return plan;
}

FusionPlan identity_plan(int m) { return sample_fusion_plan(m, 0.0, 0, false, false); }

namespace {

void check_plan(const FusionPlan& plan, std::int64_t m) {
    if (plan.m != m || static_cast<std::int64_t>(plan.permutation.size()) != m)
        throw PreconditionError("fusion plan covers " + std::to_string(plan.m) + " slots but " +
                                std::to_string(m) + " targets were given");
}

}  // namespace

torch::Tensor fuse(const torch::Tensor& context, const torch::Tensor& targets, const FusionPlan& plan) {
    if (context.dim() != 1 || targets.dim() != 2 || targets.size(1) != context.size(0))
        throw PreconditionError("fuse expects context (C) and targets (m x C) with matching C");
    return fuse_batch(context.unsqueeze(0), targets.unsqueeze(0), {plan}).squeeze(0);
}

torch::Tensor fuse_batch(const torch::Tensor& context, const torch::Tensor& targets,
                         const std::vector<FusionPlan>& plans) {
    if (context.dim() != 2 || targets.dim() != 3 || targets.size(0) != context.size(0) ||
        targets.size(2) != context.size(1))
        throw PreconditionError("fuse_batch expects context (B x C) and targets (B x m x C)");
    const auto batch = context.size(0);
    const auto m = targets.size(1);
    if (static_cast<std::int64_t>(plans.size()) != batch)
        throw PreconditionError("fuse_batch needs one plan per batch row");

    std::vector<std::int64_t> gather(static_cast<std::size_t>(batch * m));
    std::vector<float> keep(static_cast<std::size_t>(batch * m), 1.0f);
    for (std::int64_t b = 0; b < batch; ++b) {
        const auto& plan = plans[static_cast<std::size_t>(b)];
        check_plan(plan, m);
        for (std::int64_t j = 0; j < m; ++j) gather[b * m + j] = b * m + plan.permutation[j];
        for (int j : plan.mask_set) keep[b * m + j] = 0.0f;
    }
    auto opts = torch::TensorOptions().dtype(torch::kLong);
    auto index = torch::from_blob(gather.data(), {batch * m}, opts).clone();
    auto keep_t = torch::from_blob(keep.data(), {batch, m, 1}, torch::kFloat).clone().to(targets.dtype());

    auto flat = targets.reshape({batch * m, targets.size(2)});
    auto shuffled = flat.index_select(0, index).reshape(targets.sizes()) * keep_t;
    return torch::cat({context, shuffled.reshape({batch, m * targets.size(2)})}, 1);
}

}  // namespace dsfwsi
