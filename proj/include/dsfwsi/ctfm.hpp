#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "dsfwsi/errors.hpp"
#include "dsfwsi/rng.hpp"

namespace dsfwsi {

/// Shuffle + mask applied to the m target slots of one group for one view.
/// Output slot j holds target `permutation[j]`, zeroed when j is in
/// `mask_set`.
struct FusionPlan {
    int m = 0;
    std::vector<int> permutation;
    std::vector<int> mask_set;  // sorted output slot indices
    double mask_ratio = 0.0;
    std::uint64_t seed = 0;

    bool is_masked(int slot) const;
    bool operator==(const FusionPlan&) const = default;
};

struct CtfmOptions {
    double mask_ratio = 0.5;
    bool shuffle = true;  // false: identity permutation ("masking only")
    bool mask = true;     // false: empty mask set ("jigsaw only")
    bool share_plan_across_views = false;
};

/// Number of masked slots for m targets at the given ratio.
int masked_slot_count(int m, double mask_ratio);

/// Uniform random permutation and a uniform mask subset of size
/// floor(m * mask_ratio), both drawn from a generator seeded by `seed`.
FusionPlan sample_fusion_plan(int m, double mask_ratio, std::uint64_t seed, bool shuffle = true,
                              bool mask = true);

/// Identity permutation with an empty mask.
FusionPlan identity_plan(int m);

/// Concatenates `context` (C) with the permuted, masked `targets` (m x C)
/// into a vector of (m + 1) * C. Differentiable in both inputs.
torch::Tensor fuse(const torch::Tensor& context, const torch::Tensor& targets, const FusionPlan& plan);

/// Batched fuse: `context` is B x C, `targets` B x m x C, one plan per row.
torch::Tensor fuse_batch(const torch::Tensor& context, const torch::Tensor& targets,
                         const std::vector<FusionPlan>& plans);

}  // namespace dsfwsi
